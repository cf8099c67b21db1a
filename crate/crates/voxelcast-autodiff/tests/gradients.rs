//! Finite-difference validation of every reverse-mode gradient.
//!
//! Each operation is checked on at least 20 random shapes against central
//! differences in double precision, requiring relative error below 1e-4.
//! Non-scalar outputs are reduced by multiplying with a fixed random array
//! and summing, so every output element contributes to the checked scalar.

use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use voxelcast_autodiff::conv::conv_out_len;
use voxelcast_autodiff::gradcheck::{max_relative_error, nudge_from_zero, random_array};
use voxelcast_autodiff::tape::Tape;
use voxelcast_autodiff::Var;

const TOL: f64 = 1e-4;
const TRIALS: usize = 20;

fn project(t: &mut Tape<f64>, y: Var, p: &ArrayD<f64>) -> Var {
    let pv = t.constant(p.clone());
    let m = t.mul(y, pv).unwrap();
    t.sum(m)
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..TRIALS {
        let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let x = random_array(&mut rng, &[n, cin, h, w], -1.5, 1.5);
        let wk = random_array(&mut rng, &[cout, cin, k, k], -1.5, 1.5);
        let b = random_array(&mut rng, &[cout], -1.0, 1.0);
        let ho = conv_out_len(h, k, stride, pad).unwrap();
        let wo = conv_out_len(w, k, stride, pad).unwrap();
        let p = random_array(&mut rng, &[n, cout, ho, wo], -1.0, 1.0);
        let with_bias = trial % 2 == 0;
        let inputs = if with_bias { vec![x, wk, b] } else { vec![x, wk] };
        let err = max_relative_error(&inputs, |t, v| {
            let bias = if with_bias { Some(v[2]) } else { None };
            let y = t.conv2d(v[0], v[1], bias, stride, pad).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn conv3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..TRIALS {
        let (cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let (d, h, w) = (rng.gen_range(3..=4), rng.gen_range(3..=4), rng.gen_range(3..=4));
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let x = random_array(&mut rng, &[1, cin, d, h, w], -1.5, 1.5);
        let wk = random_array(&mut rng, &[cout, cin, k, k, k], -1.5, 1.5);
        let b = random_array(&mut rng, &[cout], -1.0, 1.0);
        let od = conv_out_len(d, k, stride, pad).unwrap();
        let oh = conv_out_len(h, k, stride, pad).unwrap();
        let ow = conv_out_len(w, k, stride, pad).unwrap();
        let p = random_array(&mut rng, &[1, cout, od, oh, ow], -1.0, 1.0);
        let with_bias = trial % 2 == 0;
        let inputs = if with_bias { vec![x, wk, b] } else { vec![x, wk] };
        let err = max_relative_error(&inputs, |t, v| {
            let bias = if with_bias { Some(v[2]) } else { None };
            let y = t.conv3d(v[0], v[1], bias, stride, pad).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..TRIALS {
        let (n, i, o) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=6));
        let x = random_array(&mut rng, &[n, i], -1.5, 1.5);
        let w = random_array(&mut rng, &[o, i], -1.5, 1.5);
        let b = random_array(&mut rng, &[o], -1.0, 1.0);
        let p = random_array(&mut rng, &[n, o], -1.0, 1.0);
        let err = max_relative_error(&[x, w, b], |t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..TRIALS {
        let shape: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
        let mut x = random_array(&mut rng, &shape, -1.0, 1.0);
        // Keep samples away from the kink so both finite-difference probes
        // stay on the same side of it.
        nudge_from_zero(&mut x, 1e-3);
        let p = random_array(&mut rng, &shape, -1.0, 1.0);
        let err = max_relative_error(&[x], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn sigmoid_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..TRIALS {
        let shape: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
        let x = random_array(&mut rng, &shape, -3.0, 3.0);
        let p = random_array(&mut rng, &shape, -1.0, 1.0);
        let err = max_relative_error(&[x], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn add_and_mul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..TRIALS {
        let shape: Vec<usize> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..=4)).collect();
        let a = random_array(&mut rng, &shape, -1.5, 1.5);
        let b = random_array(&mut rng, &shape, -1.5, 1.5);
        let p = random_array(&mut rng, &shape, -1.0, 1.0);
        let err = max_relative_error(&[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "add trial {trial}: relative error {err}");
        let err = max_relative_error(&[a, b], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "mul trial {trial}: relative error {err}");
    }
}

#[test]
fn scale_and_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for trial in 0..TRIALS {
        let shape: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
        let x = random_array(&mut rng, &shape, -1.5, 1.5);
        let c: f64 = rng.gen_range(-2.0..2.0);
        let p = random_array(&mut rng, &shape, -1.0, 1.0);
        let err = max_relative_error(&[x.clone()], |t, v| {
            let y = t.scale(v[0], c);
            project(t, y, &p)
        });
        assert!(err < TOL, "scale trial {trial}: relative error {err}");
        let err = max_relative_error(&[x], |t, v| t.sum(v[0]));
        assert!(err < TOL, "sum trial {trial}: relative error {err}");
    }
}

#[test]
fn concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..TRIALS {
        let axis = rng.gen_range(0..=1);
        let base: Vec<usize> = vec![rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let count = rng.gen_range(2..=3);
        let mut inputs = Vec::new();
        let mut total = 0;
        for _ in 0..count {
            let mut s = base.clone();
            s[axis] = rng.gen_range(1..=3);
            total += s[axis];
            inputs.push(random_array(&mut rng, &s, -1.5, 1.5));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let p = random_array(&mut rng, &out_shape, -1.0, 1.0);
        let err = max_relative_error(&inputs, |t, v| {
            let y = t.concat(v, axis).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn tile_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for trial in 0..TRIALS {
        let (n, f) = (rng.gen_range(1..=3), rng.gen_range(1..=5));
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x = random_array(&mut rng, &[n, f], -1.5, 1.5);
        let p = random_array(&mut rng, &[n, f, h, w], -1.0, 1.0);
        let err = max_relative_error(&[x], |t, v| {
            let y = t.tile(v[0], h, w).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for trial in 0..TRIALS {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x = random_array(&mut rng, &[n, c, h, w], -1.5, 1.5);
        let p = random_array(&mut rng, &[n, c, 2 * h, 2 * w], -1.0, 1.0);
        let err = max_relative_error(&[x], |t, v| {
            let y = t.upsample_nearest2(v[0]).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn avgpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for trial in 0..TRIALS {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (h, w) = (2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3));
        let x = random_array(&mut rng, &[n, c, h, w], -1.5, 1.5);
        let p = random_array(&mut rng, &[n, c, h / 2, w / 2], -1.0, 1.0);
        let err = max_relative_error(&[x], |t, v| {
            let y = t.avgpool2(v[0]).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn reshape_projection_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..TRIALS {
        let (n, c, d) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x = random_array(&mut rng, &[n, c, d, h, w], -1.5, 1.5);
        let p = random_array(&mut rng, &[n, c * d, h, w], -1.0, 1.0);
        let err = max_relative_error(&[x], |t, v| {
            let y = t.reshape_projection(v[0]).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn batchnorm_train_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..TRIALS {
        let c = rng.gen_range(1..=3);
        let shape: Vec<usize> = if trial % 2 == 0 {
            vec![rng.gen_range(2..=3), c, rng.gen_range(2..=4), rng.gen_range(2..=4)]
        } else {
            vec![2, c, rng.gen_range(2..=3), 2, rng.gen_range(2..=3)]
        };
        let x = random_array(&mut rng, &shape, -2.0, 2.0);
        let g = random_array(&mut rng, &[c], 0.5, 1.5);
        let b = random_array(&mut rng, &[c], -0.5, 0.5);
        let p = random_array(&mut rng, &shape, -1.0, 1.0);
        let err = max_relative_error(&[x, g, b], |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2]).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn batchnorm_eval_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..TRIALS {
        let c = rng.gen_range(1..=3);
        let shape = vec![rng.gen_range(1..=3), c, rng.gen_range(2..=4), rng.gen_range(2..=4)];
        let x = random_array(&mut rng, &shape, -2.0, 2.0);
        let g = random_array(&mut rng, &[c], 0.5, 1.5);
        let b = random_array(&mut rng, &[c], -0.5, 0.5);
        let mean = random_array(&mut rng, &[c], -0.5, 0.5);
        let var = random_array(&mut rng, &[c], 0.5, 1.5);
        let p = random_array(&mut rng, &shape, -1.0, 1.0);
        let err = max_relative_error(&[x, g, b], |t, v| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var).unwrap();
            project(t, y, &p)
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn l1_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for trial in 0..TRIALS {
        let shape: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
        // Disjoint value ranges keep every difference far from the
        // absolute-value kink.
        let a = random_array(&mut rng, &shape, 0.2, 1.0);
        let b = random_array(&mut rng, &shape, -1.0, -0.2);
        let err = max_relative_error(&[a, b], |t, v| t.l1_loss(v[0], v[1]).unwrap());
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn l2_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for trial in 0..TRIALS {
        let shape: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
        let a = random_array(&mut rng, &shape, 0.2, 1.0);
        let b = random_array(&mut rng, &shape, -1.0, -0.2);
        let err = max_relative_error(&[a, b], |t, v| t.l2_loss(v[0], v[1]).unwrap());
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn composite_network_gradients() {
    // A miniature of the full rendering network: 3D convolution, projection
    // reshape, 2D convolutions with batchnorm and relu, upsampling, and both
    // losses combined.
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for trial in 0..5 {
        let x = random_array(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0);
        let w3 = random_array(&mut rng, &[2, 2, 2, 2, 2], -0.8, 0.8);
        let w2 = random_array(&mut rng, &[3, 4, 3, 3], -0.8, 0.8);
        let g = random_array(&mut rng, &[3], 0.5, 1.5);
        let b = random_array(&mut rng, &[3], -0.5, 0.5);
        let target = random_array(&mut rng, &[1, 3, 2, 2], 0.1, 0.9);
        let err = max_relative_error(&[x, w3, w2, g, b], |t, v| {
            let c3 = t.conv3d(v[0], v[1], None, 2, 0).unwrap();
            let flat = t.reshape_projection(c3).unwrap();
            let c2 = t.conv2d(flat, v[2], None, 1, 1).unwrap();
            let (bn, _) = t.batchnorm_train(c2, v[3], v[4]).unwrap();
            let act = t.sigmoid(bn);
            let up = t.upsample_nearest2(act).unwrap();
            let down = t.avgpool2(up).unwrap();
            let tv = t.constant(target.clone());
            let l1 = t.l1_loss(down, tv).unwrap();
            let l2 = t.l2_loss(down, tv).unwrap();
            let l2s = t.scale(l2, 0.1);
            t.add(l1, l2s).unwrap()
        });
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}
