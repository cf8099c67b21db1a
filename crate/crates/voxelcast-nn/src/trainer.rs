//! Minibatch training loop: Adam on the combined pixel/feature loss, with
//! validation tracking, best-model checkpointing and a CSV metrics log.

use std::io::Write;
use std::path::PathBuf;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use voxelcast_autodiff::tape::Tape;
use voxelcast_autodiff::{ParameterStore, Var};

use crate::features::FeatureExtractor;
use crate::loss::{render_loss, LossWeights};
use crate::metrics;
use crate::model::NvrModel;
use crate::NnError;

/// One training (or evaluation) sample, already in tensor form.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// Camera-frame voxel tensor `[4, d, h, w]`.
    pub voxels: ArrayD<f32>,
    /// Light position in camera coordinates.
    pub light: [f32; 3],
    /// Splat image `[3, h, w]` (used by the plus variant).
    pub splat: ArrayD<f32>,
    /// Ground-truth rendering `[3, h, w]`.
    pub target: ArrayD<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Momentum of the batchnorm running statistics.
    pub bn_momentum: f32,
    /// Validate (and emit a complete CSV row) every this many steps;
    /// 0 disables validation.
    pub val_every: usize,
    /// Where to save the best-validation parameters, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 1e-4,
            seed: 1,
            weights: LossWeights::default(),
            bn_momentum: 0.9,
            val_every: 250,
            checkpoint: None,
        }
    }
}

/// One logged step. Validation columns are present on validation steps.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub val_mse: Option<f64>,
    pub val_dssim: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub log: Vec<StepRecord>,
    /// Best validation snapshot: (step, mse 0–255, dssim).
    pub best_val: Option<(usize, f64, f64)>,
}

pub const CSV_HEADER: &str = "step,l1,perceptual,total,val_mse,val_dssim";

fn format_row(r: &StepRecord) -> String {
    let val_mse = r.val_mse.map(|v| format!("{v:.6}")).unwrap_or_default();
    let val_dssim = r.val_dssim.map(|v| format!("{v:.6}")).unwrap_or_default();
    format!(
        "{},{:.6},{:.6},{:.6},{},{}",
        r.step, r.l1, r.perceptual, r.total, val_mse, val_dssim
    )
}

fn check_samples(model: &NvrModel, samples: &[TrainSample], what: &str) -> Result<(), NnError> {
    let c = &model.config;
    let vox_shape = [c.voxel_channels, c.voxel_dims[0], c.voxel_dims[1], c.voxel_dims[2]];
    let img_shape = [3, c.image_size, c.image_size];
    for (i, s) in samples.iter().enumerate() {
        if s.voxels.shape() != vox_shape {
            return Err(NnError::Config(format!(
                "{what} sample {i}: voxel tensor {:?}, expected {vox_shape:?}",
                s.voxels.shape()
            )));
        }
        if s.target.shape() != img_shape || s.splat.shape() != img_shape {
            return Err(NnError::Config(format!(
                "{what} sample {i}: image tensors must be {img_shape:?}"
            )));
        }
    }
    Ok(())
}

fn stack<F>(samples: &[&TrainSample], lead: &[usize], fill: F) -> ArrayD<f32>
where
    F: Fn(&TrainSample) -> ndarray::ArrayViewD<'_, f32>,
{
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(lead);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&shape));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&fill(s));
    }
    out
}

struct Batch {
    voxels: ArrayD<f32>,
    light: ArrayD<f32>,
    splat: ArrayD<f32>,
    target: ArrayD<f32>,
}

fn assemble_batch(model: &NvrModel, samples: &[&TrainSample]) -> Batch {
    let c = &model.config;
    let vox_shape = [c.voxel_channels, c.voxel_dims[0], c.voxel_dims[1], c.voxel_dims[2]];
    let img_shape = [3, c.image_size, c.image_size];
    let voxels = stack(samples, &vox_shape, |s| s.voxels.view());
    let splat = stack(samples, &img_shape, |s| s.splat.view());
    let target = stack(samples, &img_shape, |s| s.target.view());
    let light_data: Vec<f32> = samples.iter().flat_map(|s| s.light).collect();
    let light = ArrayD::from_shape_vec(IxDyn(&[samples.len(), 3]), light_data).unwrap();
    Batch { voxels, light, splat, target }
}

fn bind_batch(t: &mut Tape<f32>, model: &NvrModel, batch: &Batch) -> (Var, Var, Option<Var>, Var) {
    let voxels = t.constant(batch.voxels.clone());
    let light = t.constant(batch.light.clone());
    let splat = model.config.plus.then(|| t.constant(batch.splat.clone()));
    let target = t.constant(batch.target.clone());
    (voxels, light, splat, target)
}

/// Run eval-mode inference over `samples`, returning one `[3, h, w]` image
/// tensor per sample.
pub fn infer_images(
    model: &NvrModel,
    store: &ParameterStore,
    samples: &[TrainSample],
    batch_size: usize,
) -> Result<Vec<ArrayD<f32>>, NnError> {
    check_samples(model, samples, "inference")?;
    let bs = batch_size.max(1);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(bs) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let batch = assemble_batch(model, &refs);
        let mut t = Tape::<f32>::new();
        let (voxels, light, splat, _) = bind_batch(&mut t, model, &batch);
        let fwd = model.forward(&mut t, store, voxels, light, splat, false)?;
        let images = t.value(fwd.image);
        for i in 0..chunk.len() {
            out.push(images.index_axis(Axis(0), i).to_owned().into_dyn());
        }
    }
    Ok(out)
}

/// Mean (mse 0–255, dssim) of eval-mode predictions against targets.
pub fn evaluate(
    model: &NvrModel,
    store: &ParameterStore,
    samples: &[TrainSample],
    batch_size: usize,
) -> Result<(f64, f64), NnError> {
    if samples.is_empty() {
        return Err(NnError::Config("cannot evaluate on an empty set".into()));
    }
    let images = infer_images(model, store, samples, batch_size)?;
    let mut mse_sum = 0.0;
    let mut dssim_sum = 0.0;
    for (img, s) in images.iter().zip(samples) {
        mse_sum += metrics::mse(img, &s.target)?;
        dssim_sum += metrics::dssim(img, &s.target)?;
    }
    let n = samples.len() as f64;
    Ok((mse_sum / n, dssim_sum / n))
}

/// Train `model` starting from `store`. The CSV log (header + one row per
/// step) is streamed to `csv` when given. Fixed seeds give bit-identical
/// loss curves.
pub fn train(
    model: &NvrModel,
    mut store: ParameterStore,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    mut csv: Option<&mut dyn Write>,
) -> Result<TrainOutcome, NnError> {
    if train_set.is_empty() {
        return Err(NnError::Config("training set is empty".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(NnError::Config("steps and batch size must be positive".into()));
    }
    cfg.weights.validate()?;
    check_samples(model, train_set, "train")?;
    check_samples(model, val_set, "validation")?;

    let fx = FeatureExtractor::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();

    if let Some(w) = csv.as_deref_mut() {
        writeln!(w, "{CSV_HEADER}").map_err(|e| NnError::Io(e.to_string()))?;
    }

    let mut log = Vec::with_capacity(cfg.steps);
    let mut best_val: Option<(usize, f64, f64)> = None;

    for step in 1..=cfg.steps {
        let refs: Vec<&TrainSample> = (0..cfg.batch_size.min(train_set.len()))
            .map(|_| {
                if cursor >= order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let idx = order[cursor];
                cursor += 1;
                &train_set[idx]
            })
            .collect();
        let batch = assemble_batch(model, &refs);

        let mut t = Tape::<f32>::new();
        let (voxels, light, splat, target) = bind_batch(&mut t, model, &batch);
        let fwd = model.forward(&mut t, &store, voxels, light, splat, true)?;
        let terms = render_loss(&mut t, &fx, fwd.image, target, &cfg.weights)?;
        let l1 = *t.value(terms.l1).first().unwrap() as f64;
        let perceptual = *t.value(terms.perceptual).first().unwrap() as f64;
        let total = *t.value(terms.total).first().unwrap() as f64;
        if !total.is_finite() {
            return Err(NnError::Training(format!(
                "non-finite loss at step {step}: l1={l1} perceptual={perceptual}"
            )));
        }

        t.backward(terms.total)?;
        for (name, var) in &fwd.params {
            if let Some(g) = t.grad(*var) {
                store.set_grad(name, g.clone())?;
            }
        }
        store.adam_step(cfg.lr as f32, 0.9, 0.999, 1e-8);

        let m = cfg.bn_momentum;
        for (name, stats) in &fwd.bn_stats {
            let mean = store.get_mut(&format!("{name}.mean"))?;
            ndarray::Zip::from(mean)
                .and(&stats.mean)
                .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
            let var = store.get_mut(&format!("{name}.var"))?;
            ndarray::Zip::from(var)
                .and(&stats.var)
                .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
        }

        let validate = cfg.val_every > 0 && !val_set.is_empty() && step % cfg.val_every == 0;
        let mut record =
            StepRecord { step, l1, perceptual, total, val_mse: None, val_dssim: None };
        if validate {
            let (val_mse, val_dssim) = evaluate(model, &store, val_set, cfg.batch_size)?;
            record.val_mse = Some(val_mse);
            record.val_dssim = Some(val_dssim);
            let improved = best_val.map_or(true, |(_, best, _)| val_mse < best);
            if improved {
                best_val = Some((step, val_mse, val_dssim));
                if let Some(path) = &cfg.checkpoint {
                    store.save(path)?;
                }
            }
        }
        if let Some(w) = csv.as_deref_mut() {
            writeln!(w, "{}", format_row(&record)).map_err(|e| NnError::Io(e.to_string()))?;
        }
        log.push(record);
    }

    Ok(TrainOutcome { store, log, best_val })
}
