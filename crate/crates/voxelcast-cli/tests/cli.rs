//! End-to-end tests of the `voxelcast` binary: every subcommand runs against
//! real files in a temp directory and is checked through its outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voxelcast_cli::gen::{generate_object, AppearanceSetting};
use voxelcast_core::scenefile::{load_scene, SceneFile};
use voxelcast_core::{vxg, Camera, Image, Scene};
use voxelcast_nn::model::{NvrConfig, NvrModel};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxelcast"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to spawn voxelcast")
}

fn run_ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A scene whose grid geometry matches the full-size network configuration
/// (32³ scene cells, 64² images), written as loadable files.
fn write_desk_scene(dir: &Path, name: &str) -> PathBuf {
    let object =
        generate_object(41, AppearanceSetting::DefaultParts, 24, 2.0 / 32.0).unwrap();
    let grid_path = dir.join(format!("{name}.vxg"));
    vxg::save_grid(&object, &grid_path).unwrap();
    let scene = Scene {
        object,
        pose: Default::default(),
        ground: Default::default(),
        light_position: voxelcast_core::math::Vec3::new(0.0, 2.75, 0.0),
        camera: Camera::looking_at_origin(30.0, (64, 64)),
    };
    let path = dir.join(format!("{name}.scene"));
    SceneFile::from_scene(&scene, grid_path, None).save(&path).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = run(bin().arg("frobnicate"));
    assert_eq!(out.status.code(), Some(2));
    let out = run(&mut bin());
    assert_eq!(out.status.code(), Some(2), "missing subcommand is a usage error");
}

#[test]
fn runtime_failures_exit_one_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["oracle", "no-such.scene", "--out"])
        .arg(tmp.path().join("out")));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "stderr was: {stderr}");
}

#[test]
fn eval_of_identical_images_prints_zero_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut img = Image::filled(32, 32, [0.2, 0.5, 0.8]);
    for (i, px) in img.pixels_mut().iter_mut().enumerate() {
        px[0] = (i % 97) as f32 / 96.0;
    }
    let a = tmp.path().join("a.png");
    img.save_png(&a).unwrap();
    let stdout = run_ok(bin().arg("eval").arg(&a).arg(&a).arg("--out").arg(tmp.path()));
    assert!(
        stdout.contains("mse=0.000000 dssim=0.000000 perceptual=0.000000"),
        "stdout was: {stdout}"
    );
}

#[test]
fn oracle_splat_and_capture_produce_loadable_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_path = write_desk_scene(tmp.path(), "smoke");
    let out_dir = tmp.path().join("out");

    run_ok(bin()
        .arg("oracle")
        .arg(&scene_path)
        .args(["--shadow-samples", "2", "--out"])
        .arg(&out_dir));
    let render = Image::load_png(&out_dir.join("render.png")).unwrap();
    assert_eq!(render.dims(), (64, 64));

    run_ok(bin().arg("splat").arg(&scene_path).arg("--out").arg(&out_dir));
    let splat = Image::load_png(&out_dir.join("splat.png")).unwrap();
    assert_eq!(splat.dims(), (64, 64));

    // Capture appearance from the oracle render of the same view.
    let (scene, _) = load_scene(&scene_path).unwrap();
    let recap = tmp.path().join("recap.scene");
    SceneFile::from_scene(&scene, tmp.path().join("smoke.vxg"), Some(out_dir.join("render.png")))
        .save(&recap)
        .unwrap();
    run_ok(bin().arg("capture").arg(&recap).arg("--out").arg(&out_dir));
    let captured = vxg::load_grid(&out_dir.join("captured.vxg")).unwrap();
    assert!(captured.occupied_count() > 0);
    assert_eq!(captured.occupied_count(), scene.object.occupied_count());
}

#[test]
fn edit_writes_the_requested_absolute_values() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_path = write_desk_scene(tmp.path(), "editable");
    let out_dir = tmp.path().join("out");
    run_ok(bin()
        .arg("edit")
        .arg(&scene_path)
        .args(["--scale-x", "1.5", "--rotation-y", "25", "--light-x", "0.8", "--elevation", "40"])
        .arg("--out")
        .arg(&out_dir));
    let edited = SceneFile::load(&out_dir.join("edited.scene")).unwrap();
    assert_eq!(edited.pose.scale, (1.5, 1.0, 1.0));
    assert_eq!(edited.pose.rotation_y, 25.0);
    assert_eq!(edited.light_position.x, 0.8);
    assert_eq!(edited.camera.elevation, 40.0);

    // The stretched object really widens. Ground spans the whole grid, so
    // measure the x extent of the assembled object cells only.
    let (orig, _) = load_scene(&scene_path).unwrap();
    let object_span = |scene: &Scene| {
        let a = voxelcast_core::assemble::assemble_scene(scene, (32, 32, 32)).unwrap();
        let (mut lo, mut hi) = (usize::MAX, 0);
        for (x, y, z) in a.grid.occupied_indices() {
            if a.source[a.grid.linear(x, y, z)].is_some() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        hi + 1 - lo
    };
    let before = object_span(&orig) as f64;
    // Rotation moves extent between axes; compare against an x-scale-only edit.
    let scale_only_dir = tmp.path().join("scale-only");
    run_ok(bin()
        .arg("edit")
        .arg(&scene_path)
        .args(["--scale-x", "1.5", "--out"])
        .arg(&scale_only_dir));
    let (scaled, _) = load_scene(&scale_only_dir.join("edited.scene")).unwrap();
    let after = object_span(&scaled) as f64;
    let ratio = after / before;
    assert!(
        (1.25..=1.75).contains(&ratio),
        "x extent should grow ~1.5x, got {before} -> {after} (ratio {ratio:.2})"
    );
}

#[test]
fn edit_then_infer_matches_inference_on_an_equivalent_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_path = write_desk_scene(tmp.path(), "base");

    // A randomly initialized base-variant checkpoint is enough: inference is
    // deterministic, so both routes must agree bit-for-bit.
    let model = NvrModel::new(NvrConfig::desk(false)).unwrap();
    let ckpt = tmp.path().join("random.vxck");
    model.init_params(7).save(&ckpt).unwrap();

    let edited_dir = tmp.path().join("edited");
    run_ok(bin()
        .arg("edit")
        .arg(&scene_path)
        .args(["--rotation-y", "25", "--translate-x", "0.2", "--light-x", "0.8", "--out"])
        .arg(&edited_dir));
    let via_edit_dir = tmp.path().join("via-edit");
    run_ok(bin()
        .arg("infer")
        .arg(edited_dir.join("edited.scene"))
        .arg("--model")
        .arg(&ckpt)
        .arg("--out")
        .arg(&via_edit_dir));

    // Hand-write the same scene directly.
    let (mut scene, _) = load_scene(&scene_path).unwrap();
    scene.pose.rotation_y = 25.0;
    scene.pose.translation.0 = 0.2;
    scene.light_position.x = 0.8;
    let direct_scene = tmp.path().join("direct.scene");
    SceneFile::from_scene(&scene, tmp.path().join("base.vxg"), None)
        .save(&direct_scene)
        .unwrap();
    let direct_dir = tmp.path().join("direct");
    run_ok(bin()
        .arg("infer")
        .arg(&direct_scene)
        .arg("--model")
        .arg(&ckpt)
        .arg("--out")
        .arg(&direct_dir));

    let a = std::fs::read(via_edit_dir.join("infer.png")).unwrap();
    let b = std::fs::read(direct_dir.join("infer.png")).unwrap();
    assert_eq!(a, b, "same scene parameters must render identically");

    // Moving only the light changes the trained-model input, so even a
    // random network should not produce the identical image.
    let moved_dir = tmp.path().join("moved-light");
    run_ok(bin()
        .arg("edit")
        .arg(&scene_path)
        .args(["--rotation-y", "25", "--translate-x", "0.2", "--light-x", "-1.4", "--out"])
        .arg(&moved_dir));
    let moved_out = tmp.path().join("via-moved");
    run_ok(bin()
        .arg("infer")
        .arg(moved_dir.join("edited.scene"))
        .arg("--model")
        .arg(&ckpt)
        .arg("--out")
        .arg(&moved_out));
    let c = std::fs::read(moved_out.join("infer.png")).unwrap();
    assert_ne!(a, c, "changing the light position must change the output image");
}

#[test]
fn gen_dataset_then_train_writes_metrics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(bin()
        .args([
            "gen-dataset",
            "--train-objects",
            "1",
            "--train-views",
            "1",
            "--test-objects",
            "1",
            "--object-dims",
            "12",
            "--scene-dims",
            "16",
            "--image-size",
            "32",
            "--shadow-samples",
            "2",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&data));

    let out_dir = tmp.path().join("run");
    let stdout = run_ok(bin()
        .arg("train")
        .arg("--data")
        .arg(&data)
        .args([
            "--model",
            "nvr+",
            "--steps",
            "2",
            "--batch-size",
            "1",
            "--val-every",
            "1",
            "--val-samples",
            "1",
            "--out",
        ])
        .arg(&out_dir));
    assert!(stdout.contains("test: mse="), "stdout was: {stdout}");

    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,l1,perceptual,total,val_mse,val_dssim"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "expected one row per step: {csv}");
    assert!(rows[0].starts_with("1,"));

    // Both checkpoints exist and hold a loadable parameter set of the plus
    // variant.
    for name in ["model-final.vxck", "model-best.vxck"] {
        let store = voxelcast_autodiff::ParameterStore::load(&out_dir.join(name)).unwrap();
        assert!(store.contains("spn.0.w"), "{name} should be the plus variant");
    }
}

#[test]
fn gen_dataset_respects_config_file_with_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("gen.cfg");
    std::fs::write(
        &config,
        "# tiny dataset\ntrain_objects = 1\ntrain_views = 2\ntest_objects = 1\n\
         object_dims = 12\nscene_dims = 16\nimage_size = 32\nshadow_samples = 2\n",
    )
    .unwrap();
    let data = tmp.path().join("data");
    run_ok(bin()
        .arg("gen-dataset")
        .arg("--config")
        .arg(&config)
        .args(["--train-views", "1", "--seed", "5", "--out"])
        .arg(&data));
    let manifest =
        voxelcast_cli::dataset::load_manifest(&data.join("train")).unwrap();
    assert_eq!(manifest.setting("views_per_object"), Some("1"), "flag overrides config");
    assert_eq!(manifest.setting("scene_dims"), Some("16"), "config overrides default");
    assert_eq!(manifest.records.len(), 1);

    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = run(bin()
        .arg("gen-dataset")
        .arg("--config")
        .arg(&bad)
        .arg("--out")
        .arg(tmp.path().join("unused")));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
