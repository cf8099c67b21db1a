//! Training loss: pixel L1 plus a weighted feature-space distance.
//!
//! `total = mean|I − T| + β · (w₁·‖v₁(I) − v₁(T)‖ + w₂·‖v₂(I) − v₂(T)‖)`
//! where v₁, v₂ are the two stages of the frozen extractor and ‖·‖ is the
//! root-mean-square distance.

use voxelcast_autodiff::tape::Tape;
use voxelcast_autodiff::{AutodiffError, Scalar, Var};

use crate::features::FeatureExtractor;
use crate::NnError;

/// Weights of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the whole feature-space term.
    pub beta: f64,
    /// Per-stage weights inside the feature-space term.
    pub w: [f64; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 1.0, w: [1.0, 0.1] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.beta < 0.0 || self.w[0] < 0.0 || self.w[1] < 0.0 {
            return Err(NnError::Config(format!(
                "loss weights must be non-negative, got beta={} w={:?}",
                self.beta, self.w
            )));
        }
        Ok(())
    }
}

/// The loss split into its logged components. `perceptual` is the
/// feature-space term before scaling by β.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l1: Var,
    pub perceptual: Var,
    pub total: Var,
}

/// Build the combined loss on the tape. `pred` and `target` are image
/// batches `[n, 3, h, w]`; gradients flow into `pred` (and anything
/// upstream of it).
pub fn render_loss<S: Scalar>(
    t: &mut Tape<S>,
    extractor: &FeatureExtractor,
    pred: Var,
    target: Var,
    weights: &LossWeights,
) -> Result<LossTerms, AutodiffError> {
    let l1 = t.l1_loss(pred, target)?;
    let (p1, p2) = extractor.apply(t, pred)?;
    let (t1, t2) = extractor.apply(t, target)?;
    let f1 = t.l2_loss(p1, t1)?;
    let f2 = t.l2_loss(p2, t2)?;
    let f1w = t.scale(f1, weights.w[0]);
    let f2w = t.scale(f2, weights.w[1]);
    let perceptual = t.add(f1w, f2w)?;
    let scaled = t.scale(perceptual, weights.beta);
    let total = t.add(l1, scaled)?;
    Ok(LossTerms { l1, perceptual, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use voxelcast_autodiff::gradcheck::{max_relative_error, random_array};

    #[test]
    fn loss_of_an_image_with_itself_is_zero() {
        let fx = FeatureExtractor::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_array(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let mut t = Tape::<f64>::new();
        let a = t.constant(img);
        let terms = render_loss(&mut t, &fx, a, a, &LossWeights::default()).unwrap();
        assert_eq!(*t.value(terms.total).first().unwrap(), 0.0);
    }

    #[test]
    fn zero_beta_reduces_to_mean_absolute_error() {
        let fx = FeatureExtractor::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_array(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let b = random_array(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let direct: f64 =
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let mut t = Tape::<f64>::new();
        let av = t.constant(a);
        let bv = t.constant(b);
        let w = LossWeights { beta: 0.0, ..LossWeights::default() };
        let terms = render_loss(&mut t, &fx, av, bv, &w).unwrap();
        assert!((t.value(terms.total).first().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn components_are_non_negative_and_compose() {
        let fx = FeatureExtractor::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_array(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
        let b = random_array(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
        let mut t = Tape::<f64>::new();
        let av = t.constant(a);
        let bv = t.constant(b);
        let w = LossWeights::default();
        let terms = render_loss(&mut t, &fx, av, bv, &w).unwrap();
        let l1 = *t.value(terms.l1).first().unwrap();
        let per = *t.value(terms.perceptual).first().unwrap();
        let total = *t.value(terms.total).first().unwrap();
        assert!(l1 >= 0.0 && per >= 0.0);
        assert!((total - (l1 + w.beta * per)).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights { beta: -1.0, w: [1.0, 0.1] }.validate().is_err());
        assert!(LossWeights { beta: 1.0, w: [1.0, -0.1] }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // The full combined loss, differentiated with respect to the
        // predicted image, on 20 random inputs.
        let fx = FeatureExtractor::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            // Disjoint pixel ranges keep every difference away from the
            // absolute-value kink, and predictions whose internal relu
            // pre-activations sit within the probe step of zero are
            // resampled — finite differences cannot straddle a kink.
            let pred = loop {
                let candidate = random_array(&mut rng, &[1, 3, 8, 8], 0.55, 0.95);
                if fx.kink_margin(&candidate).unwrap() > 1e-4 {
                    break candidate;
                }
            };
            let target = random_array(&mut rng, &[1, 3, 8, 8], 0.05, 0.45);
            let w = LossWeights::default();
            let err = max_relative_error(&[pred], |t, v| {
                let tv = t.constant(target.clone());
                render_loss(t, &fx, v[0], tv, &w).unwrap().total
            });
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn loss_rejects_mismatched_shapes() {
        let fx = FeatureExtractor::new();
        let mut t = Tape::<f64>::new();
        let a = t.constant(ArrayD::zeros(ndarray::IxDyn(&[1, 3, 16, 16])));
        let b = t.constant(ArrayD::zeros(ndarray::IxDyn(&[1, 3, 8, 8])));
        assert!(render_loss(&mut t, &fx, a, b, &LossWeights::default()).is_err());
    }
}
