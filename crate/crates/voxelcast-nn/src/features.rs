//! Frozen random convolutional feature extractor.
//!
//! The image-similarity term of the training loss compares feature maps of
//! the prediction and the target through a fixed two-stage conv stack
//! (3→16 and 16→32 channels, each conv + relu + 2×2 average pool). The
//! weights are seeded once and never trained; random multiscale projections
//! are enough to measure structural agreement between two images.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use voxelcast_autodiff::tape::Tape;
use voxelcast_autodiff::{AutodiffError, Scalar, Var};

/// Seed for the frozen extractor weights. Changing it changes the loss
/// landscape, so it is a fixed constant of the library.
pub const FEATURE_SEED: u64 = 0x0F3A_7001;

const STAGE1_CHANNELS: usize = 16;
const STAGE2_CHANNELS: usize = 32;
const KERNEL: usize = 3;

/// Frozen feature extractor weights, kept in double precision and converted
/// to the tape's scalar type on use.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    w1: ArrayD<f64>,
    b1: ArrayD<f64>,
    w2: ArrayD<f64>,
    b2: ArrayD<f64>,
}

impl FeatureExtractor {
    pub fn new() -> FeatureExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let mut conv = |cout: usize, cin: usize| {
            let bound = (6.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
            let len = cout * cin * KERNEL * KERNEL;
            let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
            let w = ArrayD::from_shape_vec(IxDyn(&[cout, cin, KERNEL, KERNEL]), data).unwrap();
            let b = ArrayD::zeros(IxDyn(&[cout]));
            (w, b)
        };
        let (w1, b1) = conv(STAGE1_CHANNELS, 3);
        let (w2, b2) = conv(STAGE2_CHANNELS, STAGE1_CHANNELS);
        FeatureExtractor { w1, b1, w2, b2 }
    }

    /// The frozen filter bank, `(w1, b1, w2, b2)`. Exposed so independent
    /// reference implementations of the feature distance can share the same
    /// weights while reimplementing the arithmetic from scratch.
    pub fn weights(&self) -> (&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) {
        (&self.w1, &self.b1, &self.w2, &self.b2)
    }

    /// Distance of the nearest internal relu pre-activation to zero for the
    /// given image batch `[n, 3, h, w]` (double precision).
    ///
    /// Finite-difference gradient checks of anything routed through the
    /// extractor are only valid when no pre-activation sits within the
    /// probe step of a relu kink; callers resample inputs whose margin is
    /// too small, exactly as bare relu checks nudge their inputs.
    pub fn kink_margin(&self, image: &ArrayD<f64>) -> Result<f64, AutodiffError> {
        let mut t = Tape::<f64>::new();
        let img = t.constant(image.clone());
        let w1 = t.constant(self.w1.clone());
        let b1 = t.constant(self.b1.clone());
        let w2 = t.constant(self.w2.clone());
        let b2 = t.constant(self.b2.clone());
        let c1 = t.conv2d(img, w1, Some(b1), 1, 1)?;
        let r1 = t.relu(c1);
        let p1 = t.avgpool2(r1)?;
        let c2 = t.conv2d(p1, w2, Some(b2), 1, 1)?;
        let margin = |v: &ndarray::ArrayD<f64>| {
            v.iter().fold(f64::INFINITY, |m, &x| m.min(x.abs()))
        };
        Ok(margin(t.value(c1)).min(margin(t.value(c2))))
    }

    /// Apply both stages to an image batch `[n, 3, h, w]` (h, w divisible
    /// by 4). Returns the two feature maps; gradients flow through to the
    /// image but the weights enter the tape as constants.
    pub fn apply<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        image: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let shape = t.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(AutodiffError::Shape(format!(
                "feature extractor expects [n, 3, h, w], got {shape:?}"
            )));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(AutodiffError::Shape(format!(
                "feature extractor needs dims divisible by 4, got {shape:?}"
            )));
        }
        let w1 = t.constant(self.w1.mapv(S::from_f64));
        let b1 = t.constant(self.b1.mapv(S::from_f64));
        let w2 = t.constant(self.w2.mapv(S::from_f64));
        let b2 = t.constant(self.b2.mapv(S::from_f64));
        let c1 = t.conv2d(image, w1, Some(b1), 1, 1)?;
        let r1 = t.relu(c1);
        let v1 = t.avgpool2(r1)?;
        let c2 = t.conv2d(v1, w2, Some(b2), 1, 1)?;
        let r2 = t.relu(c2);
        let v2 = t.avgpool2(r2)?;
        Ok((v1, v2))
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_is_deterministic_and_shaped() {
        let a = FeatureExtractor::new();
        let b = FeatureExtractor::new();
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w2, b.w2);

        let mut t = Tape::<f64>::new();
        let img = t.constant(ArrayD::from_elem(IxDyn(&[2, 3, 16, 16]), 0.5));
        let (v1, v2) = a.apply(&mut t, img).unwrap();
        assert_eq!(t.shape(v1), &[2, 16, 8, 8]);
        assert_eq!(t.shape(v2), &[2, 32, 4, 4]);
    }

    #[test]
    fn extractor_rejects_bad_shapes() {
        let fx = FeatureExtractor::new();
        let mut t = Tape::<f64>::new();
        let gray = t.constant(ArrayD::zeros(IxDyn(&[1, 1, 16, 16])));
        assert!(fx.apply(&mut t, gray).is_err());
        let odd = t.constant(ArrayD::zeros(IxDyn(&[1, 3, 10, 10])));
        assert!(fx.apply(&mut t, odd).is_err());
    }
}
