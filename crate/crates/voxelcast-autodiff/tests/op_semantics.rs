//! Hand-computable operation semantics, optimizer behavior, and format
//! round-trips.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use voxelcast_autodiff::conv;
use voxelcast_autodiff::gradcheck::random_array;
use voxelcast_autodiff::tape::Tape;
use voxelcast_autodiff::ParameterStore;

fn arr(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

#[test]
fn one_by_one_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_array(&mut rng, &[2, 3, 5, 4], -1.0, 1.0);
    let w = arr(&[3, 3, 1, 1], {
        // Identity mixing: kernel = identity matrix over channels.
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        k
    });
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(w);
    let y = t.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);

    // Same in 3D.
    let x3 = random_array(&mut rng, &[1, 2, 4, 3, 3], -1.0, 1.0);
    let mut k = vec![0.0; 4];
    k[0] = 1.0;
    k[3] = 1.0;
    let w3 = arr(&[2, 2, 1, 1, 1], k);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x3.clone());
    let wv = t.constant(w3);
    let y = t.conv3d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x3);
}

#[test]
fn all_ones_kernel_on_delta_input_paints_a_block() {
    // Padded 3x3 all-ones kernel over a single unit impulse spreads it into
    // a 3x3 block of ones.
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 5, 5]));
    x[[0, 0, 2, 2]] = 1.0;
    let w = ArrayD::<f64>::ones(IxDyn(&[1, 1, 3, 3]));
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x);
    let wv = t.constant(w);
    let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let expected = if (1..=3).contains(&i) && (1..=3).contains(&j) { 1.0 } else { 0.0 };
            assert_eq!(t.value(y)[[0, 0, i, j]], expected, "at ({i},{j})");
        }
    }
}

#[test]
fn im2col_and_direct_convolutions_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..30 {
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let k = rng.gen_range(1..=3);
        let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w_dim) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
        let x = random_array(&mut rng, &[n, cin, h, w_dim], -2.0, 2.0);
        let w = random_array(&mut rng, &[cout, cin, k, k], -2.0, 2.0);
        let b = random_array(&mut rng, &[cout], -1.0, 1.0);
        let fast = conv::conv2d_forward(&x.view(), &w.view(), Some(&b.view()), stride, pad).unwrap();
        let slow = conv::conv2d_direct(&x.view(), &w.view(), Some(&b.view()), stride, pad).unwrap();
        for (a, c) in fast.iter().zip(slow.iter()) {
            let scale = a.abs().max(c.abs()).max(1.0);
            assert!((a - c).abs() / scale < 1e-12, "2d trial {trial}: {a} vs {c}");
        }
    }
    for trial in 0..20 {
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let k = rng.gen_range(1..=3);
        let (cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (d, h, w_dim) = (rng.gen_range(3..=5), rng.gen_range(3..=5), rng.gen_range(3..=5));
        let x = random_array(&mut rng, &[1, cin, d, h, w_dim], -2.0, 2.0);
        let w = random_array(&mut rng, &[cout, cin, k, k, k], -2.0, 2.0);
        let fast = conv::conv3d_forward(&x.view(), &w.view(), None, stride, pad).unwrap();
        let slow = conv::conv3d_direct(&x.view(), &w.view(), None, stride, pad).unwrap();
        for (a, c) in fast.iter().zip(slow.iter()) {
            let scale = a.abs().max(c.abs()).max(1.0);
            assert!((a - c).abs() / scale < 1e-12, "3d trial {trial}: {a} vs {c}");
        }
    }
}

#[test]
fn projection_reshape_interleaves_depth_major_channel_minor() {
    // Input indexed (h, w, d, c) = 2x2x3x4 in the channels-first layout
    // [n=1, c=4, d=3, h=2, w=2]; output channel index must be d*4 + c.
    let (h, w, d, c) = (2usize, 2usize, 3usize, 4usize);
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[1, c, d, h, w]));
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                for l in 0..c {
                    x[[0, l, k, i, j]] = (((i * 10 + j) * 10 + k) * 10 + l) as f64;
                }
            }
        }
    }
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let y = t.reshape_projection(xv).unwrap();
    assert_eq!(t.shape(y), &[1, 12, 2, 2]);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                for l in 0..c {
                    assert_eq!(t.value(y)[[0, k * c + l, i, j]], x[[0, l, k, i, j]]);
                }
            }
        }
    }

    // Multiset of values is exactly preserved, and the inverse index map
    // reconstructs the input bit-for-bit.
    let mut fwd: Vec<u64> = t.value(y).iter().map(|v| v.to_bits()).collect();
    let mut orig: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
    fwd.sort_unstable();
    orig.sort_unstable();
    assert_eq!(fwd, orig);
    let mut back = ArrayD::<f64>::zeros(x.raw_dim());
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                for l in 0..c {
                    back[[0, l, k, i, j]] = t.value(y)[[0, k * c + l, i, j]];
                }
            }
        }
    }
    assert_eq!(back, x);
}

#[test]
fn projection_reshape_rejects_wrong_rank() {
    let mut t = Tape::<f64>::new();
    let xv = t.constant(ArrayD::zeros(IxDyn(&[2, 3, 4, 5])));
    assert!(t.reshape_projection(xv).is_err());
}

#[test]
fn relu_clamps_negatives_and_passes_positives() {
    let mut t = Tape::<f64>::new();
    let xv = t.constant(arr(&[5], vec![-2.0, -0.5, 0.0, 0.5, 2.0]));
    let y = t.relu(xv);
    assert_eq!(t.value(y).as_slice().unwrap(), &[0.0, 0.0, 0.0, 0.5, 2.0]);
}

#[test]
fn batchnorm_training_output_is_standardized_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Spread the inputs wide so the variance stabilizer is negligible
    // relative to the tolerance.
    let x = random_array(&mut rng, &[4, 3, 6, 6], -3.0, 3.0);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x);
    let g = t.constant(ArrayD::ones(IxDyn(&[3])));
    let b = t.constant(ArrayD::zeros(IxDyn(&[3])));
    let (y, stats) = t.batchnorm_train(xv, g, b).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = t
            .value(y)
            .indexed_iter()
            .filter(|(idx, _)| idx[1] == c)
            .map(|(_, v)| *v)
            .collect();
        let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-10, "channel {c} mean {m}");
        assert!((var - 1.0).abs() < 1e-5, "channel {c} variance {var}");
        assert!(stats.var[[c]] > 0.5, "batch stats exposed");
    }
}

#[test]
fn batchnorm_eval_uses_the_supplied_statistics() {
    let x = arr(&[1, 2, 1, 1], vec![3.0, 5.0]);
    let mean = arr(&[2], vec![1.0, 1.0]);
    let var = arr(&[2], vec![4.0, 4.0]);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x);
    let g = t.constant(arr(&[2], vec![2.0, 2.0]));
    let b = t.constant(arr(&[2], vec![0.5, 0.5]));
    let y = t.batchnorm_eval(xv, g, b, &mean, &var).unwrap();
    // (x - 1)/sqrt(4 + eps) * 2 + 0.5
    let e0 = (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() * 2.0 + 0.5;
    let e1 = (5.0 - 1.0) / (4.0f64 + 1e-5).sqrt() * 2.0 + 0.5;
    assert!((t.value(y)[[0, 0, 0, 0]] - e0).abs() < 1e-12);
    assert!((t.value(y)[[0, 1, 0, 0]] - e1).abs() < 1e-12);
}

#[test]
fn l1_loss_is_zero_on_self_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_array(&mut rng, &[3, 7], -1.0, 1.0);
    let b = random_array(&mut rng, &[3, 7], -1.0, 1.0);
    let mut t = Tape::<f64>::new();
    let av = t.constant(a.clone());
    let bv = t.constant(b.clone());
    let self_loss = t.l1_loss(av, av).unwrap();
    assert_eq!(*t.value(self_loss).first().unwrap(), 0.0);
    let ab = t.l1_loss(av, bv).unwrap();
    let ba = t.l1_loss(bv, av).unwrap();
    assert_eq!(t.value(ab), t.value(ba));
    // Agrees with a direct mean-absolute computation.
    let direct: f64 =
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    assert!((t.value(ab).first().unwrap() - direct).abs() < 1e-15);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_array(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = random_array(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let b = random_array(&mut rng, &[4], -1.0, 1.0);
    let run = || {
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let c = t.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        let r = t.relu(c);
        let s = t.sigmoid(r);
        let bits: Vec<u64> = t.value(s).iter().map(|v| v.to_bits()).collect();
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_zero_gradient_leaves_parameters_and_increments_step() {
    let mut store = ParameterStore::new();
    let vals = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0f32, -2.0, 0.5]).unwrap();
    store.insert("p", vals.clone());
    store.set_grad("p", ArrayD::zeros(IxDyn(&[3]))).unwrap();
    store.adam_step(1e-3, 0.9, 0.999, 1e-8);
    assert_eq!(store.get("p").unwrap(), &vals);
    assert_eq!(store.step_count(), 1);
}

#[test]
fn adam_constant_gradient_update_approaches_learning_rate() {
    // With a constant gradient g, bias-corrected moments equal g and g²
    // exactly, so each step moves the parameter by lr·g/(g + eps) ≈ lr.
    let mut store = ParameterStore::new();
    store.insert("p", ArrayD::from_elem(IxDyn(&[1]), 10.0f32));
    let lr = 1e-3f32;
    let mut prev = 10.0f32;
    for step in 0..50 {
        store.set_grad("p", ArrayD::from_elem(IxDyn(&[1]), 0.5f32)).unwrap();
        store.adam_step(lr, 0.9, 0.999, 1e-8);
        let cur = store.get("p").unwrap()[[0]];
        let delta = prev - cur;
        assert!(
            (delta - lr).abs() < 1e-3 * lr,
            "step {step}: update {delta} should be ~{lr}"
        );
        prev = cur;
    }
}

#[test]
fn adam_descends_a_quadratic_bowl_monotonically() {
    let mut store = ParameterStore::new();
    store.insert("x", ArrayD::from_elem(IxDyn(&[1]), 1.0f32));
    let mut last = f32::INFINITY;
    for _ in 0..100 {
        let x = store.get("x").unwrap()[[0]];
        let loss = 0.5 * x * x;
        assert!(loss < last, "loss must strictly decrease: {loss} vs {last}");
        last = loss;
        store.set_grad("x", ArrayD::from_elem(IxDyn(&[1]), x)).unwrap();
        store.adam_step(1e-3, 0.9, 0.999, 1e-8);
    }
}

#[test]
fn untrainable_buffers_are_not_updated() {
    let mut store = ParameterStore::new();
    store.insert_buffer("running", ArrayD::from_elem(IxDyn(&[2]), 3.0f32));
    store.set_grad("running", ArrayD::ones(IxDyn(&[2]))).unwrap();
    store.adam_step(1e-1, 0.9, 0.999, 1e-8);
    assert_eq!(store.get("running").unwrap(), &ArrayD::from_elem(IxDyn(&[2]), 3.0f32));
}

#[test]
fn checkpoint_roundtrip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.vxck");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParameterStore::new();
    let w: ArrayD<f32> = random_array(&mut rng, &[4, 3, 3, 3], -1.0, 1.0).mapv(|v| v as f32);
    let b: ArrayD<f32> = random_array(&mut rng, &[4], -1.0, 1.0).mapv(|v| v as f32);
    store.insert("conv.w", w.clone());
    store.insert("conv.b", b.clone());
    store.insert_buffer("bn.mean", ArrayD::from_elem(IxDyn(&[4]), 0.25f32));
    // Advance the optimizer so the step count is nontrivial.
    store.set_grad("conv.w", ArrayD::zeros(w.raw_dim())).unwrap();
    store.adam_step(1e-3, 0.9, 0.999, 1e-8);
    store.save(&path).unwrap();

    let loaded = ParameterStore::load(&path).unwrap();
    assert_eq!(loaded.get("conv.w").unwrap(), &w);
    assert_eq!(loaded.get("conv.b").unwrap(), &b);
    assert_eq!(loaded.get("bn.mean").unwrap(), &ArrayD::from_elem(IxDyn(&[4]), 0.25f32));
    assert_eq!(loaded.step_count(), 1);
    assert!(loaded.is_trainable("conv.w"));
    assert!(!loaded.is_trainable("bn.mean"));

    // Corruption is rejected.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(ParameterStore::load(&path).is_err());
}

#[test]
fn shape_errors_are_reported_not_panicked() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(ArrayD::zeros(IxDyn(&[2, 3])));
    let b = t.constant(ArrayD::zeros(IxDyn(&[3, 2])));
    assert!(t.add(a, b).is_err());
    assert!(t.l1_loss(a, b).is_err());

    let x = t.constant(ArrayD::zeros(IxDyn(&[1, 3, 5, 5])));
    let w = t.constant(ArrayD::zeros(IxDyn(&[2, 4, 3, 3])));
    assert!(t.conv2d(x, w, None, 1, 1).is_err(), "channel mismatch");
    let wide = t.constant(ArrayD::zeros(IxDyn(&[2, 3, 9, 9])));
    assert!(t.conv2d(x, wide, None, 1, 0).is_err(), "kernel larger than input");
}
