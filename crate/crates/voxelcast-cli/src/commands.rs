//! Implementations of the command-line subcommands. Each takes the global
//! options (seed, output directory, optional config file) plus its own
//! parsed arguments and returns a pipeline error on failure; printing a
//! short summary on success is the command's responsibility.

use std::fs;
use std::fs::File;
use std::path::PathBuf;

use clap::Args;
use voxelcast_autodiff::ParameterStore;
use voxelcast_core::assemble::{assemble_scene, world_to_camera};
use voxelcast_core::capture::{capture_object_colors_sized, default_scene_side, AppearanceSource};
use voxelcast_core::oracle::{render_target, RenderSettings, DEFAULT_BACKGROUND};
use voxelcast_core::scenefile::{load_scene, SceneFile};
use voxelcast_core::{vxg, Image, Scene};
use voxelcast_nn::input::{image_tensor, light_camera, tensor_image, voxel_tensor};
use voxelcast_nn::metrics::eval_metrics;
use voxelcast_nn::model::{NvrConfig, NvrModel};
use voxelcast_nn::trainer::{evaluate, infer_images, train, TrainConfig, TrainSample};
use voxelcast_nn::FeatureExtractor;

use crate::config::ConfigMap;
use crate::dataset::{
    dataset_light, generate_dataset, load_manifest, load_samples, object_splat_canvas,
    splat_over_background, DatasetSettings, DATASET_LIGHT_INTENSITY,
};
use crate::gen::SettingKind;
use crate::{io_err, PipelineError};

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
    pub config: Option<ConfigMap>,
}

impl Globals {
    fn out_file(&self, name: &str) -> Result<PathBuf, PipelineError> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(self.out.join(name))
    }

    /// The config file scoped to a command: every present key must be one
    /// the command understands.
    fn config_for(&self, allowed: &[&str]) -> Result<Option<&ConfigMap>, PipelineError> {
        if let Some(c) = &self.config {
            c.ensure_known(allowed)?;
        }
        Ok(self.config.as_ref())
    }
}

/// Scene-grid side length: the flag if given, otherwise sized so scene
/// cells match the object's voxel size.
fn scene_side(scene: &Scene, flag: Option<usize>) -> usize {
    flag.unwrap_or_else(|| default_scene_side(&scene.object))
}

/// The network configuration for a dataset's grid/image sizes. The
/// architecture's stage counts tie the two together (image side must be
/// twice the grid side, grid side a multiple of 8); validation reports
/// anything inconsistent.
pub fn model_config(scene_dims: usize, image_size: usize, plus: bool) -> Result<NvrConfig, PipelineError> {
    let mut c = NvrConfig::desk(plus);
    c.voxel_dims = [scene_dims; 3];
    c.image_size = image_size;
    c.validate()?;
    Ok(c)
}

fn parse_variant(name: &str) -> Result<bool, PipelineError> {
    match name.to_ascii_lowercase().as_str() {
        "nvr" => Ok(false),
        "nvr+" | "nvr-plus" | "plus" => Ok(true),
        other => Err(PipelineError::Invalid(format!(
            "unknown model variant '{other}' (expected 'nvr' or 'nvr+')"
        ))),
    }
}

/// Build the network inputs for a loaded scene: camera-frame voxels, light
/// in camera coordinates, and the splat image. The target slot is zeros
/// (inference has no reference image).
pub fn scene_sample(scene: &Scene, scene_dims: usize) -> Result<TrainSample, PipelineError> {
    let dims3 = (scene_dims, scene_dims, scene_dims);
    let assembled = assemble_scene(scene, dims3)?;
    let cam_grid = world_to_camera(&assembled.grid, &scene.camera)?;
    let canvas = object_splat_canvas(&assembled, &scene.camera);
    let splat_img = splat_over_background(&canvas, DEFAULT_BACKGROUND);
    let (w, h) = scene.camera.image_dims;
    Ok(TrainSample {
        voxels: voxel_tensor(&cam_grid),
        light: light_camera(scene.light_position, &scene.camera),
        splat: image_tensor(&splat_img),
        target: ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, h, w])),
    })
}

// ---------------------------------------------------------------------------
// gen-dataset

#[derive(Debug, Default, Args)]
pub struct GenDatasetArgs {
    /// Number of training objects.
    #[arg(long)]
    pub train_objects: Option<usize>,
    /// Random views per training object.
    #[arg(long)]
    pub train_views: Option<usize>,
    /// Number of swept test objects.
    #[arg(long)]
    pub test_objects: Option<usize>,
    /// Object grid side length (voxels).
    #[arg(long)]
    pub object_dims: Option<usize>,
    /// Scene grid side length (voxels).
    #[arg(long)]
    pub scene_dims: Option<usize>,
    /// Rendered image side length (pixels).
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Appearance setting: single_color, default_parts or textured.
    #[arg(long)]
    pub setting: Option<String>,
    /// Area-light shadow rays per shading point.
    #[arg(long)]
    pub shadow_samples: Option<usize>,
    /// Area-light intensity for the rendered targets.
    #[arg(long)]
    pub light_intensity: Option<f64>,
}

pub const GEN_DATASET_KEYS: &[&str] = &[
    "train_objects",
    "train_views",
    "test_objects",
    "object_dims",
    "scene_dims",
    "image_size",
    "setting",
    "shadow_samples",
    "light_intensity",
];

pub fn cmd_gen_dataset(g: &Globals, a: &GenDatasetArgs) -> Result<(), PipelineError> {
    let mut s = DatasetSettings { seed: g.seed, ..DatasetSettings::default() };
    if let Some(c) = g.config_for(GEN_DATASET_KEYS)? {
        c.apply("train_objects", &mut s.train_objects)?;
        c.apply("train_views", &mut s.train_views)?;
        c.apply("test_objects", &mut s.test_objects)?;
        c.apply("object_dims", &mut s.object_dims)?;
        c.apply("scene_dims", &mut s.scene_dims)?;
        c.apply("image_size", &mut s.image_size)?;
        c.apply("shadow_samples", &mut s.shadow_samples)?;
        c.apply("light_intensity", &mut s.light_intensity)?;
        if let Some(v) = c.get("setting") {
            s.setting = SettingKind::parse(v)?;
        }
    }
    if let Some(v) = a.train_objects {
        s.train_objects = v;
    }
    if let Some(v) = a.train_views {
        s.train_views = v;
    }
    if let Some(v) = a.test_objects {
        s.test_objects = v;
    }
    if let Some(v) = a.object_dims {
        s.object_dims = v;
    }
    if let Some(v) = a.scene_dims {
        s.scene_dims = v;
    }
    if let Some(v) = a.image_size {
        s.image_size = v;
    }
    if let Some(v) = a.shadow_samples {
        s.shadow_samples = v;
    }
    if let Some(v) = a.light_intensity {
        s.light_intensity = v;
    }
    if let Some(v) = &a.setting {
        s.setting = SettingKind::parse(v)?;
    }
    fs::create_dir_all(&g.out).map_err(|e| io_err(&g.out, e))?;
    let (train, test) = generate_dataset(&g.out, &s)?;
    println!(
        "wrote {} train and {} test samples ({} appearance) under {}",
        train.records.len(),
        test.records.len(),
        s.setting.name(),
        g.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// capture / splat / oracle

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Scene description file.
    pub scene: PathBuf,
    /// Scene grid side length (default: cells match the object's voxel size).
    #[arg(long)]
    pub scene_dims: Option<usize>,
}

pub fn cmd_capture(g: &Globals, a: &SceneArgs) -> Result<(), PipelineError> {
    g.config_for(&[])?;
    let (scene, appearance) = load_scene(&a.scene)?;
    let image_path = appearance.ok_or_else(|| {
        PipelineError::Invalid(format!(
            "{}: scene file names no appearance image to capture from",
            a.scene.display()
        ))
    })?;
    let image = Image::load_png(&image_path)?;
    let source = AppearanceSource::new(image, scene.camera)?;
    let sd = scene_side(&scene, a.scene_dims);
    let grid = capture_object_colors_sized(&scene, &source, (sd, sd, sd))?;
    let out = g.out_file("captured.vxg")?;
    vxg::save_grid(&grid, &out)?;
    println!("captured {} voxels -> {}", grid.occupied_count(), out.display());
    Ok(())
}

pub fn cmd_splat(g: &Globals, a: &SceneArgs) -> Result<(), PipelineError> {
    g.config_for(&[])?;
    let (scene, _) = load_scene(&a.scene)?;
    let sd = scene_side(&scene, a.scene_dims);
    let assembled = assemble_scene(&scene, (sd, sd, sd))?;
    let canvas = object_splat_canvas(&assembled, &scene.camera);
    let covered = canvas.coverage.iter().filter(|&&c| c).count();
    let img = splat_over_background(&canvas, DEFAULT_BACKGROUND);
    let out = g.out_file("splat.png")?;
    img.save_png(&out)?;
    println!("splatted {covered} covered pixels -> {}", out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Area-light shadow rays per shading point.
    #[arg(long)]
    pub shadow_samples: Option<usize>,
    /// Area-light intensity.
    #[arg(long)]
    pub light_intensity: Option<f64>,
}

pub fn cmd_oracle(g: &Globals, a: &OracleArgs) -> Result<(), PipelineError> {
    g.config_for(&[])?;
    let (scene, _) = load_scene(&a.scene.scene)?;
    let sd = scene_side(&scene, a.scene.scene_dims);
    let assembled = assemble_scene(&scene, (sd, sd, sd))?;
    let settings = RenderSettings {
        shadow_samples: a.shadow_samples.unwrap_or(16),
        rng_seed: g.seed,
        ..RenderSettings::default()
    };
    let light = dataset_light(
        scene.light_position,
        a.light_intensity.unwrap_or(DATASET_LIGHT_INTENSITY),
    );
    let img = render_target(&assembled.grid, &light, &scene.camera, &settings)?;
    let (w, h) = img.dims();
    let out = g.out_file("render.png")?;
    img.save_png(&out)?;
    println!("rendered {w}x{h} -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (the directory holding train/ and test/).
    #[arg(long)]
    pub data: PathBuf,
    /// Model variant: nvr or nvr+.
    #[arg(long)]
    pub model: Option<String>,
    /// Optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Samples per optimization step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Validate every N steps (0 disables validation).
    #[arg(long)]
    pub val_every: Option<usize>,
    /// How many test samples to hold out for validation.
    #[arg(long)]
    pub val_samples: Option<usize>,
}

pub const TRAIN_KEYS: &[&str] =
    &["model", "steps", "batch_size", "lr", "val_every", "val_samples"];

pub fn cmd_train(g: &Globals, a: &TrainArgs) -> Result<(), PipelineError> {
    let mut model_name = "nvr+".to_string();
    let mut cfg = TrainConfig { seed: g.seed, ..TrainConfig::default() };
    let mut val_samples = 32usize;
    if let Some(c) = g.config_for(TRAIN_KEYS)? {
        c.apply("model", &mut model_name)?;
        c.apply("steps", &mut cfg.steps)?;
        c.apply("batch_size", &mut cfg.batch_size)?;
        c.apply("lr", &mut cfg.lr)?;
        c.apply("val_every", &mut cfg.val_every)?;
        c.apply("val_samples", &mut val_samples)?;
    }
    if let Some(v) = &a.model {
        model_name = v.clone();
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.val_every {
        cfg.val_every = v;
    }
    if let Some(v) = a.val_samples {
        val_samples = v;
    }
    let plus = parse_variant(&model_name)?;

    let train_dir = a.data.join("train");
    let test_dir = a.data.join("test");
    let train_manifest = load_manifest(&train_dir)?;
    let test_manifest = load_manifest(&test_dir)?;
    let scene_dims: usize = train_manifest.setting_parsed("scene_dims")?;
    let image_size: usize = train_manifest.setting_parsed("image_size")?;
    let model = NvrModel::new(model_config(scene_dims, image_size, plus)?)?;

    let train_set = load_samples(&train_dir, &train_manifest)?;
    let test_set = load_samples(&test_dir, &test_manifest)?;
    let val_set: Vec<TrainSample> =
        test_set.iter().take(val_samples.clamp(1, test_set.len())).cloned().collect();
    println!(
        "training {model_name} on {} samples ({} validation, {} test) for {} steps",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        cfg.steps
    );

    fs::create_dir_all(&g.out).map_err(|e| io_err(&g.out, e))?;
    cfg.checkpoint = Some(g.out.join("model-best.vxck"));
    let csv_path = g.out.join("metrics.csv");
    let mut csv = File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let store = model.init_params(g.seed);
    let outcome = train(&model, store, &train_set, &val_set, &cfg, Some(&mut csv))?;
    let final_path = g.out.join("model-final.vxck");
    outcome.store.save(&final_path)?;

    let first = outcome.log.first().expect("training ran at least one step");
    let last = outcome.log.last().expect("training ran at least one step");
    println!("loss: {:.5} -> {:.5} over {} steps", first.total, last.total, outcome.log.len());
    if let Some((step, mse, dssim)) = outcome.best_val {
        println!("best validation at step {step}: mse={mse:.4} dssim={dssim:.5}");
    }
    let (mse, dssim) = evaluate(&model, &outcome.store, &test_set, cfg.batch_size)?;
    println!("test: mse={mse:.4} dssim={dssim:.5}");
    println!("saved {} and {}", final_path.display(), csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// infer / eval / edit

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Scene description file.
    pub scene: PathBuf,
    /// Trained parameter checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Scene grid side length (default: cells match the object's voxel size).
    #[arg(long)]
    pub scene_dims: Option<usize>,
}

pub fn cmd_infer(g: &Globals, a: &InferArgs) -> Result<(), PipelineError> {
    g.config_for(&[])?;
    let (scene, _) = load_scene(&a.scene)?;
    let store = ParameterStore::load(&a.model)?;
    // The refinement branch's parameters are present iff the checkpoint is
    // the plus variant.
    let plus = store.contains("spn.0.w");
    let (w, h) = scene.camera.image_dims;
    if w != h {
        return Err(PipelineError::Invalid(format!(
            "inference needs square images, scene camera is {w}x{h}"
        )));
    }
    let sd = scene_side(&scene, a.scene_dims);
    let model = NvrModel::new(model_config(sd, w, plus)?)?;
    let sample = scene_sample(&scene, sd)?;
    let images = infer_images(&model, &store, std::slice::from_ref(&sample), 1)?;
    let img = tensor_image(&images[0])?;
    let out = g.out_file("infer.png")?;
    img.save_png(&out)?;
    println!(
        "{} inference -> {}",
        if plus { "splat-refined" } else { "base" },
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// First image.
    pub image_a: PathBuf,
    /// Second image.
    pub image_b: PathBuf,
}

pub fn cmd_eval(g: &Globals, a: &EvalArgs) -> Result<(), PipelineError> {
    g.config_for(&[])?;
    let ia = image_tensor(&Image::load_png(&a.image_a)?);
    let ib = image_tensor(&Image::load_png(&a.image_b)?);
    let fx = FeatureExtractor::new();
    let (mse, dssim, perceptual) = eval_metrics(&ia, &ib, &fx)?;
    println!("mse={mse:.6} dssim={dssim:.6} perceptual={perceptual:.6}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Scene description file to start from.
    pub scene: PathBuf,
    /// New rotation about the vertical axis, degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub rotation_y: Option<f64>,
    /// New ground-plane translation, x component.
    #[arg(long, allow_negative_numbers = true)]
    pub translate_x: Option<f64>,
    /// New ground-plane translation, z component.
    #[arg(long, allow_negative_numbers = true)]
    pub translate_z: Option<f64>,
    /// New x scale factor.
    #[arg(long, allow_negative_numbers = true)]
    pub scale_x: Option<f64>,
    /// New y scale factor.
    #[arg(long, allow_negative_numbers = true)]
    pub scale_y: Option<f64>,
    /// New z scale factor.
    #[arg(long, allow_negative_numbers = true)]
    pub scale_z: Option<f64>,
    /// New light x position.
    #[arg(long, allow_negative_numbers = true)]
    pub light_x: Option<f64>,
    /// New light height.
    #[arg(long, allow_negative_numbers = true)]
    pub light_y: Option<f64>,
    /// New light z position.
    #[arg(long, allow_negative_numbers = true)]
    pub light_z: Option<f64>,
    /// New camera elevation, degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub elevation: Option<f64>,
}

pub fn cmd_edit(g: &Globals, a: &EditArgs) -> Result<(), PipelineError> {
    g.config_for(&[])?;
    // Loading resolves the grid/image references against the original file's
    // directory, so the edited copy works from anywhere.
    let mut file = SceneFile::load(&a.scene)?;
    if let Some(v) = a.rotation_y {
        file.pose.rotation_y = v;
    }
    if let Some(v) = a.translate_x {
        file.pose.translation.0 = v;
    }
    if let Some(v) = a.translate_z {
        file.pose.translation.1 = v;
    }
    if let Some(v) = a.scale_x {
        file.pose.scale.0 = v;
    }
    if let Some(v) = a.scale_y {
        file.pose.scale.1 = v;
    }
    if let Some(v) = a.scale_z {
        file.pose.scale.2 = v;
    }
    if let Some(v) = a.light_x {
        file.light_position.x = v;
    }
    if let Some(v) = a.light_y {
        file.light_position.y = v;
    }
    if let Some(v) = a.light_z {
        file.light_position.z = v;
    }
    if let Some(v) = a.elevation {
        file.camera.elevation = v;
    }
    // Surface invalid edits (bad scale, out-of-envelope light, camera below
    // the horizon) now rather than at the next command.
    file.clone().into_scene()?;
    let out = g.out_file("edited.scene")?;
    file.save(&out)?;
    println!("edited scene -> {}", out.display());
    Ok(())
}
