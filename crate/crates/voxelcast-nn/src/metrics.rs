//! Image-quality metrics: mean squared error (8-bit scale), structural
//! dissimilarity, and the feature-space distance used by the training loss.

use ndarray::{Array2, ArrayD, IxDyn};

use voxelcast_autodiff::tape::Tape;

use crate::features::FeatureExtractor;
use crate::loss::LossWeights;
use crate::NnError;

/// SSIM window: 11×11 Gaussian, σ = 1.5.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<(usize, usize), NnError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(NnError::Config(format!("image shapes differ: {sa:?} vs {sb:?}")));
    }
    if sa.len() != 3 || sa[0] != 3 {
        return Err(NnError::Config(format!("expected [3, h, w] images, got {sa:?}")));
    }
    Ok((sa[1], sa[2]))
}

/// Mean squared error on the [0, 1] scale.
pub fn mse_unit(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64, NnError> {
    check_pair(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Mean squared error on the 8-bit (0–255) scale.
pub fn mse(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64, NnError> {
    Ok(mse_unit(a, b)? * 255.0 * 255.0)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter, valid region only: output is
/// `(h − 10) × (w − 10)`.
fn filter_valid(img: &Array2<f64>) -> Array2<f64> {
    let win = gaussian_window();
    let (h, w) = img.dim();
    let wo = w - (SSIM_WINDOW - 1);
    let ho = h - (SSIM_WINDOW - 1);
    let mut rows = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * img[[y, x + k]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * rows[[y + k, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Structural dissimilarity `(1 − SSIM) / 2` with a Gaussian-weighted
/// window, averaged over the three channels and the valid window positions.
pub fn dssim(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64, NnError> {
    let (h, w) = check_pair(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(NnError::Config(format!(
            "images must be at least {SSIM_WINDOW}×{SSIM_WINDOW} for dssim, got {h}×{w}"
        )));
    }
    let c1 = (SSIM_K1) * (SSIM_K1);
    let c2 = (SSIM_K2) * (SSIM_K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let mut xa = Array2::<f64>::zeros((h, w));
        let mut xb = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                xa[[y, x]] = a[[ch, y, x]] as f64;
                xb[[y, x]] = b[[ch, y, x]] as f64;
            }
        }
        let mu_a = filter_valid(&xa);
        let mu_b = filter_valid(&xb);
        let m_aa = filter_valid(&(&xa * &xa));
        let m_bb = filter_valid(&(&xb * &xb));
        let m_ab = filter_valid(&(&xa * &xb));
        for ((y, x), &ma) in mu_a.indexed_iter() {
            let mb = mu_b[[y, x]];
            let va = m_aa[[y, x]] - ma * ma;
            let vb = m_bb[[y, x]] - mb * mb;
            let cov = m_ab[[y, x]] - ma * mb;
            let ssim = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += ssim;
            count += 1;
        }
    }
    Ok((1.0 - total / count as f64) / 2.0)
}

/// Feature-space distance with the training-loss stage weights (1.0, 0.1),
/// computed in double precision through the frozen extractor.
pub fn perceptual(
    a: &ArrayD<f32>,
    b: &ArrayD<f32>,
    fx: &FeatureExtractor,
) -> Result<f64, NnError> {
    let (h, w) = check_pair(a, b)?;
    let weights = LossWeights::default();
    let mut t = Tape::<f64>::new();
    let to64 = |img: &ArrayD<f32>| {
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[1, 3, h, w]));
        for ((c, y, x), v) in out
            .indexed_iter_mut()
            .map(|(idx, v)| ((idx[1], idx[2], idx[3]), v))
        {
            *v = img[[c, y, x]] as f64;
        }
        out
    };
    let av = t.constant(to64(a));
    let bv = t.constant(to64(b));
    let (a1, a2) = fx.apply(&mut t, av)?;
    let (b1, b2) = fx.apply(&mut t, bv)?;
    let f1 = t.l2_loss(a1, b1)?;
    let f2 = t.l2_loss(a2, b2)?;
    let v1 = *t.value(f1).first().unwrap();
    let v2 = *t.value(f2).first().unwrap();
    Ok(weights.w[0] * v1 + weights.w[1] * v2)
}

/// All three metrics at once: (mse 0–255, dssim, perceptual).
pub fn eval_metrics(
    a: &ArrayD<f32>,
    b: &ArrayD<f32>,
    fx: &FeatureExtractor,
) -> Result<(f64, f64, f64), NnError> {
    Ok((mse(a, b)?, dssim(a, b)?, perceptual(a, b, fx)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use voxelcast_autodiff::gradcheck::random_array;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ArrayD<f32> {
        random_array(rng, &[3, h, w], 0.0, 1.0).mapv(|v| v as f32)
    }

    #[test]
    fn identical_images_score_zero_everywhere() {
        let fx = FeatureExtractor::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 16, 16);
        let (m, d, p) = eval_metrics(&img, &img, &fx).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(d, 0.0);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn black_versus_white_hits_the_closed_forms() {
        let fx = FeatureExtractor::new();
        let black = ArrayD::<f32>::zeros(IxDyn(&[3, 16, 16]));
        let white = ArrayD::<f32>::ones(IxDyn(&[3, 16, 16]));
        let (m, d, _) = eval_metrics(&black, &white, &fx).unwrap();
        assert_eq!(m, 255.0 * 255.0);
        // For constant images SSIM reduces to C1/(1 + C1):
        // (2·0·1 + C1)(0 + C2) / ((0 + 1 + C1)(0 + 0 + C2)).
        let c1 = 0.01f64 * 0.01;
        let expected = (1.0 - c1 / (1.0 + c1)) / 2.0;
        assert!((d - expected).abs() < 1e-12, "dssim {d} vs closed form {expected}");
        assert!((d - 0.49995).abs() < 1e-4);
    }

    #[test]
    fn metrics_are_symmetric() {
        let fx = FeatureExtractor::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = random_image(&mut rng, 16, 20);
            let b = random_image(&mut rng, 16, 20);
            assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            let dab = dssim(&a, &b).unwrap();
            let dba = dssim(&b, &a).unwrap();
            assert!((dab - dba).abs() < 1e-12);
            let pab = perceptual(&a, &b, &fx).unwrap();
            let pba = perceptual(&b, &a, &fx).unwrap();
            assert!((pab - pba).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_or_tiny_images_are_rejected() {
        let a = ArrayD::<f32>::zeros(IxDyn(&[3, 16, 16]));
        let b = ArrayD::<f32>::zeros(IxDyn(&[3, 8, 8]));
        assert!(mse(&a, &b).is_err());
        let tiny = ArrayD::<f32>::zeros(IxDyn(&[3, 8, 8]));
        assert!(dssim(&tiny, &tiny).is_err());
    }
}
