//! Named parameter storage with Adam optimizer state and a versioned binary
//! checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::AutodiffError;

/// One named tensor: trainable parameters carry Adam moments; plain buffers
/// (running statistics) are saved and loaded but never optimized.
#[derive(Clone, Debug)]
pub struct Entry {
    pub values: ArrayD<f32>,
    pub grad: Option<ArrayD<f32>>,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
    trainable: bool,
}

/// Named parameters and buffers with optimizer state.
///
/// Iteration order is the name order (sorted), which keeps every walk over
/// the store deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: ArrayD<f32>) {
        let dim = values.raw_dim();
        self.entries.insert(
            name.to_string(),
            Entry {
                values,
                grad: None,
                m: ArrayD::zeros(dim.clone()),
                v: ArrayD::zeros(dim),
                trainable: true,
            },
        );
    }

    /// Insert a non-trainable buffer (running statistics and the like).
    pub fn insert_buffer(&mut self, name: &str, values: ArrayD<f32>) {
        let dim = values.raw_dim();
        self.entries.insert(
            name.to_string(),
            Entry {
                values,
                grad: None,
                m: ArrayD::zeros(dim.clone()),
                v: ArrayD::zeros(dim),
                trainable: false,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>, AutodiffError> {
        self.entries
            .get(name)
            .map(|e| &e.values)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f32>, AutodiffError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.values)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))
    }

    pub fn set_grad(&mut self, name: &str, grad: ArrayD<f32>) -> Result<(), AutodiffError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))?;
        if grad.shape() != e.values.shape() {
            return Err(AutodiffError::Shape(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                grad.shape(),
                e.values.shape()
            )));
        }
        e.grad = Some(grad);
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, _)| k.as_str())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map_or(false, |e| e.trainable)
    }

    /// Number of scalar parameters in trainable entries.
    pub fn parameter_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.values.len()).sum()
    }

    /// One Adam update with bias correction over every trainable entry whose
    /// gradient is populated; gradients are cleared afterwards.
    pub fn adam_step(&mut self, lr: f32, beta1: f32, beta2: f32, eps: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for e in self.entries.values_mut() {
            if !e.trainable {
                e.grad = None;
                continue;
            }
            let Some(g) = e.grad.take() else { continue };
            ndarray::Zip::from(&mut e.m).and(&g).for_each(|m, &gv| {
                *m = beta1 * *m + (1.0 - beta1) * gv;
            });
            ndarray::Zip::from(&mut e.v).and(&g).for_each(|v, &gv| {
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
            });
            ndarray::Zip::from(&mut e.values)
                .and(&e.m)
                .and(&e.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Serialize parameters and buffers (not optimizer state) to `path`.
    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(e.trainable as u8);
            out.extend_from_slice(&(e.values.ndim() as u32).to_le_bytes());
            for &d in e.values.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.values.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Load a checkpoint previously written by [`ParameterStore::save`].
    pub fn load(path: &Path) -> Result<ParameterStore, AutodiffError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], AutodiffError> {
            if *pos + n > bytes.len() {
                return Err(AutodiffError::Format("checkpoint truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(AutodiffError::Format("not a parameter checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut store = ParameterStore::new();
        store.step = step;
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| AutodiffError::Format("checkpoint name not UTF-8".into()))?;
            let trainable = take(&mut pos, 1)?[0] != 0;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| AutodiffError::Format(format!("checkpoint tensor: {e}")))?;
            if trainable {
                store.insert(&name, arr);
            } else {
                store.insert_buffer(&name, arr);
            }
        }
        if pos != bytes.len() {
            return Err(AutodiffError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(store)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VXCK";
const CHECKPOINT_VERSION: u32 = 1;
