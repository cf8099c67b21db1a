//! Dataset generation and loading.
//!
//! For every object: sample views, render each view's ground-truth image
//! with the reference renderer, pick one view as the appearance source,
//! capture voxel colors from that image, and splat the captured voxels into
//! every view. A manifest (plain text, one record line per sample) ties the
//! files together.
//!
//! All randomness is derived from the dataset seed, object index and view
//! index, so generation is byte-identical across runs and independent of
//! the number of worker threads; each file is written to a temporary
//! sibling and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use voxelcast_core::assemble::{assemble_scene, world_to_camera, Assembled};
use voxelcast_core::capture::{capture_object_colors_sized, AppearanceSource};
use voxelcast_core::math::Vec3;
use voxelcast_core::oracle::{render_target, AreaLight, RenderSettings, DEFAULT_BACKGROUND};
use voxelcast_core::scenefile::{load_scene, SceneFile};
use voxelcast_core::splat::{splat, SplatCanvas};
use voxelcast_core::{vxg, Camera, Ground, Image, Scene, VoxelGrid};
use voxelcast_nn::input::{image_tensor, light_camera, voxel_tensor};
use voxelcast_nn::TrainSample;

use crate::gen::{generate_object, SettingKind, TextureSplit};
use crate::sample::{random_views, sweep_views, SamplingSpec, ViewSample};
use crate::{derive_seed, io_err, PipelineError};

/// Area-light intensity used for dataset renders (and by the rendering
/// commands, so re-renders match dataset targets). The reference renderer's
/// unit-intensity default underexposes scenes lit from the sampling volume
/// (2.5–3 units above the floor); this value puts lit surfaces in the same
/// brightness band as their captured voxel colors.
pub const DATASET_LIGHT_INTENSITY: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    fn texture_split(self) -> TextureSplit {
        match self {
            Split::Train => TextureSplit::Train,
            Split::Test => TextureSplit::Test,
        }
    }
}

/// Everything `gen-dataset` needs. The defaults are the desk-scale
/// configuration: 200 train objects x 5 views and 20 swept test objects on
/// a 32³ scene grid with 64² images.
#[derive(Clone, Copy, Debug)]
pub struct DatasetSettings {
    pub train_objects: usize,
    pub train_views: usize,
    pub test_objects: usize,
    pub object_dims: usize,
    pub scene_dims: usize,
    pub image_size: usize,
    pub setting: SettingKind,
    pub shadow_samples: usize,
    pub light_intensity: f64,
    pub seed: u64,
}

impl Default for DatasetSettings {
    fn default() -> DatasetSettings {
        DatasetSettings {
            train_objects: 200,
            train_views: 5,
            test_objects: 20,
            object_dims: 24,
            scene_dims: 32,
            image_size: 64,
            setting: SettingKind::DefaultParts,
            shadow_samples: 16,
            light_intensity: DATASET_LIGHT_INTENSITY,
            seed: 0,
        }
    }
}

impl DatasetSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.train_objects == 0 || self.train_views == 0 || self.test_objects == 0 {
            return Err(PipelineError::Invalid("object and view counts must be positive".into()));
        }
        if self.object_dims < 8 || self.scene_dims < self.object_dims {
            return Err(PipelineError::Invalid(format!(
                "grid dims (object {}, scene {}) must satisfy 8 <= object <= scene",
                self.object_dims, self.scene_dims
            )));
        }
        if self.image_size < 16 {
            return Err(PipelineError::Invalid(format!("image size {} too small", self.image_size)));
        }
        if self.shadow_samples == 0 || !(self.light_intensity > 0.0) {
            return Err(PipelineError::Invalid("light settings must be positive".into()));
        }
        Ok(())
    }

    /// Object voxels are the same size as scene cells, so identity-posed
    /// assembly is resample-free.
    fn object_voxel_size(&self) -> f64 {
        2.0 / self.scene_dims as f64
    }
}

/// One line of the manifest: a (scene, view) pair with every file that
/// belongs to it. Paths are relative to the split directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub object: String,
    pub object_seed: u64,
    pub view: usize,
    pub elevation: f64,
    pub rotation: f64,
    pub translation: (f64, f64),
    pub light: Vec3,
    pub scene: PathBuf,
    pub grid: PathBuf,
    pub source: PathBuf,
    pub splat: PathBuf,
    pub target: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    /// Generation settings snapshot, in `key = value` form.
    pub settings: Vec<(String, String)>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn setting(&self, key: &str) -> Option<&str> {
        self.settings.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn setting_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, PipelineError> {
        let v = self.setting(key).ok_or_else(|| {
            PipelineError::Invalid(format!("manifest is missing the '{key}' setting"))
        })?;
        v.parse::<T>().map_err(|_| {
            PipelineError::Invalid(format!("manifest setting '{key}': cannot parse '{v}'"))
        })
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::from("# voxelcast dataset manifest\n");
        let _ = writeln!(s, "split = {}", self.split);
        for (k, v) in &self.settings {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "record object={} seed={} view={} elevation={} rotation={} translation={},{} \
                 light={},{},{} scene={} grid={} source={} splat={} target={}",
                r.object,
                r.object_seed,
                r.view,
                r.elevation,
                r.rotation,
                r.translation.0,
                r.translation.1,
                r.light.x,
                r.light.y,
                r.light.z,
                r.scene.display(),
                r.grid.display(),
                r.source.display(),
                r.splat.display(),
                r.target.display(),
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<DatasetManifest, PipelineError> {
        let mut split = None;
        let mut settings = Vec::new();
        let mut records = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("record ") {
                records.push(parse_record(rest, lineno + 1)?);
            } else if let Some((k, v)) = line.split_once('=') {
                let (k, v) = (k.trim().to_string(), v.trim().to_string());
                if k == "split" {
                    split = Some(v);
                } else {
                    settings.push((k, v));
                }
            } else {
                return Err(PipelineError::Invalid(format!(
                    "manifest line {}: unrecognized '{line}'",
                    lineno + 1
                )));
            }
        }
        Ok(DatasetManifest {
            split: split
                .ok_or_else(|| PipelineError::Invalid("manifest has no 'split' line".into()))?,
            settings,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        atomic_write(path, |tmp| {
            fs::write(tmp, self.to_text()).map_err(|e| io_err(tmp, e))
        })
    }

    pub fn load(path: &Path) -> Result<DatasetManifest, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        DatasetManifest::parse(&text)
    }
}

fn parse_record(rest: &str, lineno: usize) -> Result<SampleRecord, PipelineError> {
    let mut fields = std::collections::HashMap::new();
    for token in rest.split_whitespace() {
        let Some((k, v)) = token.split_once('=') else {
            return Err(PipelineError::Invalid(format!(
                "manifest line {lineno}: bad record token '{token}'"
            )));
        };
        if fields.insert(k.to_string(), v.to_string()).is_some() {
            return Err(PipelineError::Invalid(format!(
                "manifest line {lineno}: duplicate record field '{k}'"
            )));
        }
    }
    let take = |key: &str| -> Result<String, PipelineError> {
        fields.get(key).cloned().ok_or_else(|| {
            PipelineError::Invalid(format!("manifest line {lineno}: record missing '{key}'"))
        })
    };
    let num = |key: &str| -> Result<f64, PipelineError> {
        take(key)?.parse::<f64>().map_err(|_| {
            PipelineError::Invalid(format!("manifest line {lineno}: '{key}' is not a number"))
        })
    };
    let nums = |key: &str, n: usize| -> Result<Vec<f64>, PipelineError> {
        let raw = take(key)?;
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != n {
            return Err(PipelineError::Invalid(format!(
                "manifest line {lineno}: '{key}' expects {n} comma-separated numbers"
            )));
        }
        parts
            .iter()
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    PipelineError::Invalid(format!(
                        "manifest line {lineno}: '{key}' has a bad number '{p}'"
                    ))
                })
            })
            .collect()
    };
    let t = nums("translation", 2)?;
    let l = nums("light", 3)?;
    Ok(SampleRecord {
        object: take("object")?,
        object_seed: take("seed")?.parse::<u64>().map_err(|_| {
            PipelineError::Invalid(format!("manifest line {lineno}: bad object seed"))
        })?,
        view: take("view")?.parse::<usize>().map_err(|_| {
            PipelineError::Invalid(format!("manifest line {lineno}: bad view index"))
        })?,
        elevation: num("elevation")?,
        rotation: num("rotation")?,
        translation: (t[0], t[1]),
        light: Vec3::new(l[0], l[1], l[2]),
        scene: PathBuf::from(take("scene")?),
        grid: PathBuf::from(take("grid")?),
        source: PathBuf::from(take("source")?),
        splat: PathBuf::from(take("splat")?),
        target: PathBuf::from(take("target")?),
    })
}

/// Write through a temporary sibling and rename into place, so readers never
/// observe a half-written file and interrupted runs leave no partial output
/// under the final name.
pub fn atomic_write(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    let name = path
        .file_name()
        .ok_or_else(|| PipelineError::Io(format!("{}: no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Splat the posed object's voxels alone onto an empty canvas. The static
/// ground slab carries no captured appearance, so it is excluded: the splat
/// transports the object's image-sourced colors into the target view, and
/// everything else is left for the renderer to infer.
pub fn object_splat_canvas(assembled: &Assembled, camera: &Camera) -> SplatCanvas {
    let mut object_only = assembled.grid.clone();
    for (i, src) in assembled.source.iter().enumerate() {
        if src.is_none() {
            object_only.set_at(i, [0.0; 4]);
        }
    }
    splat(&object_only, camera)
}

/// Replace uncovered splat pixels with the renderer's background color so
/// splats and rendered targets are directly comparable images.
pub fn splat_over_background(canvas: &SplatCanvas, background: [f32; 3]) -> Image {
    let mut img = canvas.color.clone();
    for (i, px) in img.pixels_mut().iter_mut().enumerate() {
        if !canvas.coverage[i] {
            *px = background;
        }
    }
    img
}

/// The light used for dataset renders at `center`.
pub fn dataset_light(center: Vec3, intensity: f64) -> AreaLight {
    AreaLight { intensity, ..AreaLight::at(center) }
}

struct ObjectOutcome {
    records: Vec<SampleRecord>,
    invalid: usize,
    notes: Vec<String>,
}

/// Generate both splits under `root` (`root/train`, `root/test`). Returns
/// the two manifests; fails if more than 1% of samples are invalid or if
/// the splits ever share an object seed.
pub fn generate_dataset(
    root: &Path,
    settings: &DatasetSettings,
) -> Result<(DatasetManifest, DatasetManifest), PipelineError> {
    settings.validate()?;
    let train = generate_split(root, settings, Split::Train)?;
    let test = generate_split(root, settings, Split::Test)?;
    let train_seeds: std::collections::HashSet<u64> =
        train.records.iter().map(|r| r.object_seed).collect();
    if test.records.iter().any(|r| train_seeds.contains(&r.object_seed)) {
        return Err(PipelineError::Invalid(
            "split hygiene violation: an object seed appears in both splits".into(),
        ));
    }
    Ok((train, test))
}

pub fn generate_split(
    root: &Path,
    settings: &DatasetSettings,
    split: Split,
) -> Result<DatasetManifest, PipelineError> {
    settings.validate()?;
    let dir = root.join(split.name());
    for sub in ["scenes", "grids", "sources", "splats", "targets"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(&dir.join(sub), e))?;
    }
    let n_objects = match split {
        Split::Train => settings.train_objects,
        Split::Test => settings.test_objects,
    };

    let outcomes: Vec<ObjectOutcome> = (0..n_objects)
        .into_par_iter()
        .map(|index| build_object(&dir, settings, split, index))
        .collect();

    let mut records = Vec::new();
    let mut invalid = 0usize;
    for o in outcomes {
        for note in &o.notes {
            eprintln!("gen-dataset[{}]: {note}", split.name());
        }
        invalid += o.invalid;
        records.extend(o.records);
    }
    let attempted = records.len() + invalid;
    if attempted == 0 {
        return Err(PipelineError::Invalid("no samples were attempted".into()));
    }
    if invalid * 100 > attempted {
        return Err(PipelineError::Invalid(format!(
            "{invalid} of {attempted} samples invalid (over the 1% budget)"
        )));
    }

    let manifest = DatasetManifest {
        split: split.name().to_string(),
        settings: vec![
            ("seed".into(), settings.seed.to_string()),
            ("setting".into(), settings.setting.name().to_string()),
            ("objects".into(), n_objects.to_string()),
            ("views_per_object".into(), settings.train_views.to_string()),
            ("object_dims".into(), settings.object_dims.to_string()),
            ("scene_dims".into(), settings.scene_dims.to_string()),
            ("image_size".into(), settings.image_size.to_string()),
            ("shadow_samples".into(), settings.shadow_samples.to_string()),
            ("light_intensity".into(), settings.light_intensity.to_string()),
        ],
        records,
    };
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

fn build_object(
    dir: &Path,
    settings: &DatasetSettings,
    split: Split,
    index: usize,
) -> ObjectOutcome {
    let name = format!("{}-{:04}", split.name(), index);
    let object_seed = derive_seed(&[settings.seed, split.tag(), index as u64, 1]);
    let spec = match split {
        Split::Train => SamplingSpec::train(settings.train_views, settings.seed),
        Split::Test => SamplingSpec::test(settings.seed),
    };
    let mut view_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[settings.seed, split.tag(), index as u64, 2]));
    let views = match split {
        Split::Train => random_views(&spec, &mut view_rng, settings.train_views),
        Split::Test => sweep_views(&spec, &mut view_rng),
    };
    let src_view = view_rng.gen_range(0..views.len());

    let mut out =
        ObjectOutcome { records: Vec::new(), invalid: 0, notes: Vec::new() };
    let fail_all = |out: &mut ObjectOutcome, what: &str, e: PipelineError| {
        out.invalid += views.len();
        out.notes.push(format!("{name}: {what}: {e} ({} views dropped)", views.len()));
    };

    let true_grid = match generate_object(
        object_seed,
        settings.setting.for_split(split.texture_split()),
        settings.object_dims,
        settings.object_voxel_size(),
    ) {
        Ok(g) => g,
        Err(e) => {
            fail_all(&mut out, "object generation", e);
            return out;
        }
    };

    let sd = settings.scene_dims;
    let dims3 = (sd, sd, sd);
    let camera_for =
        |v: &ViewSample| Camera::looking_at_origin(v.elevation, (settings.image_size, settings.image_size));
    let scene_with = |object: &VoxelGrid, v: &ViewSample| Scene {
        object: object.clone(),
        pose: v.pose,
        ground: Ground::default(),
        light_position: v.light,
        camera: camera_for(v),
    };

    // Ground-truth renders for every view, from the true-color object.
    let mut targets: Vec<Option<Image>> = Vec::with_capacity(views.len());
    for (k, v) in views.iter().enumerate() {
        let render = || -> Result<Image, PipelineError> {
            let assembled = assemble_scene(&scene_with(&true_grid, v), dims3)?;
            let rs = RenderSettings {
                shadow_samples: settings.shadow_samples,
                rng_seed: derive_seed(&[settings.seed, split.tag(), index as u64, 3, k as u64]),
                ..RenderSettings::default()
            };
            let light = dataset_light(v.light, settings.light_intensity);
            let img = render_target(&assembled.grid, &light, &camera_for(v), &rs)?;
            atomic_write(&dir.join("targets").join(format!("{name}-v{k}.png")), |tmp| {
                img.save_png(tmp).map_err(Into::into)
            })?;
            Ok(img)
        };
        match render() {
            Ok(img) => targets.push(Some(img)),
            Err(e) => {
                out.invalid += 1;
                out.notes.push(format!("{name} view {k}: target render: {e}"));
                targets.push(None);
            }
        }
    }

    // Appearance capture from the source view's rendered image, re-read from
    // the saved file so the stored grid is exactly what a re-run of the
    // capture command would produce.
    let captured = (|| -> Result<VoxelGrid, PipelineError> {
        if targets[src_view].is_none() {
            return Err(PipelineError::Invalid("appearance-source view failed to render".into()));
        }
        let src_png = dir.join("targets").join(format!("{name}-v{src_view}.png"));
        let src_img = Image::load_png(&src_png)?;
        atomic_write(&dir.join("sources").join(format!("{name}.png")), |tmp| {
            src_img.save_png(tmp).map_err(Into::into)
        })?;
        let src_scene = scene_with(&true_grid, &views[src_view]);
        let source = AppearanceSource::new(src_img, src_scene.camera)?;
        let grid = capture_object_colors_sized(&src_scene, &source, dims3)?;
        atomic_write(&dir.join("grids").join(format!("{name}.vxg")), |tmp| {
            vxg::save_grid(&grid, tmp).map_err(Into::into)
        })?;
        Ok(grid)
    })();
    let captured = match captured {
        Ok(g) => g,
        Err(e) => {
            // Views already marked invalid (failed targets) stay counted; the
            // rest become invalid because they have no captured appearance.
            let remaining = targets.iter().filter(|t| t.is_some()).count();
            out.invalid += remaining;
            out.notes.push(format!("{name}: appearance capture: {e} ({remaining} views dropped)"));
            return out;
        }
    };

    // Per-view scene file, splat and manifest record for the captured object.
    for (k, v) in views.iter().enumerate() {
        if targets[k].is_none() {
            continue; // already counted invalid
        }
        let emit = || -> Result<SampleRecord, PipelineError> {
            let scene = scene_with(&captured, v);
            let scene_rel = PathBuf::from(format!("scenes/{name}-v{k}.scene"));
            let file = SceneFile::from_scene(
                &scene,
                PathBuf::from(format!("../grids/{name}.vxg")),
                Some(PathBuf::from(format!("../sources/{name}.png"))),
            );
            atomic_write(&dir.join(&scene_rel), |tmp| file.save(tmp).map_err(Into::into))?;

            let assembled = assemble_scene(&scene, dims3)?;
            let canvas = object_splat_canvas(&assembled, &scene.camera);
            let splat_img = splat_over_background(&canvas, DEFAULT_BACKGROUND);
            let splat_rel = PathBuf::from(format!("splats/{name}-v{k}.png"));
            atomic_write(&dir.join(&splat_rel), |tmp| splat_img.save_png(tmp).map_err(Into::into))?;

            Ok(SampleRecord {
                object: name.clone(),
                object_seed,
                view: k,
                elevation: v.elevation,
                rotation: v.pose.rotation_y,
                translation: v.pose.translation,
                light: v.light,
                scene: scene_rel,
                grid: PathBuf::from(format!("grids/{name}.vxg")),
                source: PathBuf::from(format!("sources/{name}.png")),
                splat: splat_rel,
                target: PathBuf::from(format!("targets/{name}-v{k}.png")),
            })
        };
        match emit() {
            Ok(r) => out.records.push(r),
            Err(e) => {
                out.invalid += 1;
                out.notes.push(format!("{name} view {k}: {e}"));
            }
        }
    }
    out
}

/// Load a split's manifest from its directory.
pub fn load_manifest(split_dir: &Path) -> Result<DatasetManifest, PipelineError> {
    DatasetManifest::load(&split_dir.join("manifest.txt"))
}

/// Build the trainer's input tensors for one record: assembled scene grid
/// resampled to the camera frame, light in camera coordinates, and the
/// splat and target images.
pub fn load_sample(
    split_dir: &Path,
    scene_dims: usize,
    record: &SampleRecord,
) -> Result<TrainSample, PipelineError> {
    load_sample_degraded(split_dir, scene_dims, record, 1.0, false)
}

/// Same as [`load_sample`], optionally degrading the object grid to a
/// fraction of its resolution first (resolution-robustness studies). When
/// `recompute_splat` is set the splat image is re-derived from the
/// (possibly degraded) grid instead of read from disk, so every resolution
/// level flows through the identical pipeline.
pub fn load_sample_degraded(
    split_dir: &Path,
    scene_dims: usize,
    record: &SampleRecord,
    factor: f64,
    recompute_splat: bool,
) -> Result<TrainSample, PipelineError> {
    let (mut scene, _) = load_scene(&split_dir.join(&record.scene))?;
    if factor != 1.0 {
        scene.object = scene.object.degrade_resolution(factor)?;
    }
    let dims3 = (scene_dims, scene_dims, scene_dims);
    let assembled = assemble_scene(&scene, dims3)?;
    let cam_grid = world_to_camera(&assembled.grid, &scene.camera)?;
    let voxels = voxel_tensor(&cam_grid);
    let light = light_camera(scene.light_position, &scene.camera);
    let splat_img = if recompute_splat {
        let canvas = object_splat_canvas(&assembled, &scene.camera);
        splat_over_background(&canvas, DEFAULT_BACKGROUND)
    } else {
        Image::load_png(&split_dir.join(&record.splat))?
    };
    let target = Image::load_png(&split_dir.join(&record.target))?;
    Ok(TrainSample {
        voxels,
        light,
        splat: image_tensor(&splat_img),
        target: image_tensor(&target),
    })
}

/// Load every record of a manifest into trainer samples.
pub fn load_samples(
    split_dir: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<TrainSample>, PipelineError> {
    let sd: usize = manifest.setting_parsed("scene_dims")?;
    manifest.records.iter().map(|r| load_sample(split_dir, sd, r)).collect()
}
