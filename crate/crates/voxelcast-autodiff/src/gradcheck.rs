//! Central finite-difference verification of reverse-mode gradients.

use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};

/// Step size for central differences (double precision).
pub const FD_STEP: f64 = 1e-5;

/// Build an array of the given shape with uniform values in `(lo, hi)`.
pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let len: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// Push values away from a kink at the origin so finite differences stay on
/// one side of it (used for relu and absolute-value style ops).
pub fn nudge_from_zero(a: &mut ArrayD<f64>, margin: f64) {
    a.mapv_inplace(|v| {
        if v.abs() < margin {
            if v >= 0.0 {
                v + margin
            } else {
                v - margin
            }
        } else {
            v
        }
    });
}

/// Maximum relative error between reverse-mode gradients and central finite
/// differences of `f` over every element of every input.
///
/// `f` must build the expression on the given tape from the input variables
/// and return a scalar output variable.
pub fn max_relative_error(
    inputs: &[ArrayD<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    // Reverse-mode gradients.
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).len(), 1, "gradient check output must be scalar");
    tape.backward(out).expect("backward failed");
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(tape.value(*v).raw_dim()))
        })
        .collect();

    let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = perturbed.iter().map(|a| t.constant(a.clone())).collect();
        let o = f(&mut t, &vs);
        *t.value(o).first().unwrap()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = input.as_slice().unwrap()[idx];
            work[i].as_slice_mut().unwrap()[idx] = orig + FD_STEP;
            let hi = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - FD_STEP;
            let lo = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;
            let fd = (hi - lo) / (2.0 * FD_STEP);
            let an = analytic[i].as_slice().unwrap()[idx];
            let scale = fd.abs().max(an.abs());
            if scale > 1e-6 {
                worst = worst.max((fd - an).abs() / scale);
            }
        }
    }
    worst
}
