//! Tensor operations: closed-form examples and finite-difference checks.

use osnet_core::gradcheck::{check_inputs, GradCheckReport};
use osnet_core::rng::seeded;
use osnet_core::tape::{Mode, Tape, Var};
use osnet_core::{Error, Result, RunningStats, Tensor};
use proptest::prelude::*;

const OP_TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut seeded(seed))
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output entry carries a
/// distinct weight in the gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(y), seed ^ 0xABCD));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_passes(r: GradCheckReport) {
    assert!(r.checked > 0);
    assert!(r.passed(), "{}: max relative error {:.3e} over {} entries", r.name, r.max_rel_err, r.checked);
}

#[test]
fn conv_of_ones_sums_window() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), [1, 1, 1, 1]);
    assert_eq!(t.value(y).data(), [9.0]);
}

#[test]
fn unit_kernels_are_identities() {
    let x0 = randn(&[2, 3, 4, 5], 1);
    let mut t = Tape::new();
    let x = t.constant(x0.clone());
    let one = t.constant(Tensor::ones(&[1, 1, 1, 1]));
    let single = t.constant(x0.sample(0).unwrap().reshaped(&[1, 3, 4, 5]).unwrap());
    let single1 = t.constant(Tensor::new(&[1, 1, 4, 5], x0.data()[..20].to_vec()).unwrap());
    let y = t.conv2d(single1, one, 1, 0).unwrap();
    assert_eq!(t.value(y).data(), &x0.data()[..20]);
    let mut eye = vec![0.0; 9];
    (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
    let eye = t.constant(Tensor::new(&[3, 3, 1, 1], eye).unwrap());
    let y = t.pointwise_conv2d(x, eye).unwrap();
    assert_eq!(t.value(y), &x0);
    let sum_kernel = t.constant(Tensor::ones(&[1, 3, 1, 1]));
    let y = t.pointwise_conv2d(single, sum_kernel).unwrap();
    for j in 0..20 {
        let expect: f64 = (0..3).map(|c| x0.data()[c * 20 + j]).sum();
        assert!((t.value(y).data()[j] - expect).abs() < 1e-12);
    }
}

#[test]
fn conv_output_extent_and_shape_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 9, 7]));
    let w = t.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let y = t.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(t.value(y).shape(), [1, 3, 5, 4]);
    let bad = t.constant(Tensor::zeros(&[3, 4, 3, 3]));
    assert!(matches!(t.conv2d(x, bad, 1, 0), Err(Error::Shape(_))));
    let dw_bad = t.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(t.depthwise_conv2d(x, dw_bad, 1), Err(Error::Shape(_))));
    assert!(t.conv2d(x, w, 0, 0).is_err());
}

#[test]
fn depthwise_ones_and_delta_kernels() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[1, 2, 3, 3]));
    let w = t.constant(Tensor::ones(&[2, 1, 3, 3]));
    let y = t.depthwise_conv2d(x, w, 0).unwrap();
    assert_eq!(t.value(y).data(), [9.0, 9.0]);

    let x0 = randn(&[1, 2, 5, 5], 2);
    let x = t.constant(x0.clone());
    let mut delta = vec![0.0; 18];
    delta[4] = 1.0;
    delta[13] = 1.0;
    let d = t.constant(Tensor::new(&[2, 1, 3, 3], delta).unwrap());
    let y = t.depthwise_conv2d(x, d, 1).unwrap();
    assert_eq!(t.value(y), &x0);
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), [0.0, 0.0, 2.0]);
    let s = t.sigmoid(x).unwrap();
    assert_eq!(t.value(s).data()[1], 0.5);

    let x0 = randn(&[2, 3, 4, 4], 3);
    let x = t.constant(x0.clone());
    let ones = t.constant(Tensor::ones(&[2, 3, 1, 1]));
    let y = t.mul(x, ones).unwrap();
    assert_eq!(t.value(y), &x0);
    let y = t.mul(ones, x).unwrap();
    assert_eq!(t.value(y), &x0);
    let wrong = t.constant(Tensor::ones(&[2, 2, 1, 1]));
    assert!(matches!(t.mul(x, wrong), Err(Error::Shape(_))));
    assert!(matches!(t.add(x, wrong), Err(Error::Shape(_))));
}

#[test]
fn pooling_examples() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(&[2, 3, 4, 5], 1.75));
    let g = t.global_avg_pool(c).unwrap();
    assert_eq!(t.value(g).shape(), [2, 3, 1, 1]);
    assert!(t.value(g).data().iter().all(|v| (v - 1.75).abs() < 1e-15));

    let ramp = t.constant(Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
    let m = t.max_pool(ramp, 2, 2, 0).unwrap();
    assert_eq!(t.value(m).data(), [5.0, 7.0, 13.0, 15.0]);
    let a = t.avg_pool(ramp, 2, 2).unwrap();
    assert_eq!(t.value(a).data(), [2.5, 4.5, 10.5, 12.5]);
    let tiny = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(matches!(t.max_pool(tiny, 3, 1, 0), Err(Error::Shape(_))));
    assert!(matches!(t.avg_pool(tiny, 3, 1), Err(Error::Shape(_))));
}

#[test]
fn linear_examples() {
    let mut t = Tape::new();
    let x0 = randn(&[3, 4], 4);
    let x = t.constant(x0.clone());
    let mut eye = vec![0.0; 16];
    (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
    let w = t.constant(Tensor::new(&[4, 4], eye).unwrap());
    let b = t.constant(Tensor::zeros(&[4]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y), &x0);
    let zw = t.constant(Tensor::zeros(&[2, 4]));
    let bias = t.constant(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
    let y = t.linear(x, zw, Some(bias)).unwrap();
    assert_eq!(t.value(y).data(), [0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
}

fn channel_moments(v: &Tensor, per_sample: bool) -> Vec<(f64, f64)> {
    let [n, c, h, w] = v.dims4().unwrap();
    let hw = h * w;
    let groups: Vec<Vec<f64>> = if per_sample {
        (0..n * c).map(|p| v.data()[p * hw..(p + 1) * hw].to_vec()).collect()
    } else {
        (0..c).map(|ch| (0..n).flat_map(|s| v.data()[(s * c + ch) * hw..][..hw].to_vec()).collect()).collect()
    };
    groups
        .iter()
        .map(|g| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            (m, g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / g.len() as f64)
        })
        .collect()
}

#[test]
fn batch_norm_standardises_and_tracks_statistics() {
    let mut t = Tape::new();
    let mut x0 = randn(&[4, 3, 5, 5], 5);
    x0.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 2.0);
    let x = t.constant(x0.clone());
    let g = t.constant(Tensor::ones(&[3]));
    let b = t.constant(Tensor::zeros(&[3]));
    let mut stats = RunningStats::new("bn".into(), 3);
    let y = t.batch_norm(x, g, b, &mut stats, Mode::Train).unwrap();
    for (m, v) in channel_moments(t.value(y), false) {
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "mean {m} var {v}");
    }
    let batch = channel_moments(&x0, false);
    let count = (4 * 25) as f64;
    for ch in 0..3 {
        assert!((stats.mean[ch] - 0.1 * batch[ch].0).abs() < 1e-12);
        let unbiased = batch[ch].1 * count / (count - 1.0);
        assert!((stats.var[ch] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }
    assert_eq!(stats.batches, 1);

    let mut fresh = RunningStats::new("fresh".into(), 3);
    let z0 = randn(&[2, 3, 2, 2], 6);
    let z = t.constant(z0.clone());
    let y = t.batch_norm(z, g, b, &mut fresh, Mode::Eval).unwrap();
    for (a, e) in t.value(y).data().iter().zip(z0.data()) {
        assert!((a - e / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
    assert_eq!(fresh.batches, 0);
}

#[test]
fn instance_norm_standardises_each_sample_and_channel() {
    let mut t = Tape::new();
    let x0 = randn(&[3, 2, 6, 5], 7);
    let x = t.constant(x0);
    let g = t.constant(Tensor::ones(&[2]));
    let b = t.constant(Tensor::zeros(&[2]));
    let y = t.instance_norm(x, g, b).unwrap();
    for (m, v) in channel_moments(t.value(y), true) {
        assert!(m.abs() < 1e-5);
        assert!((v.sqrt() - 1.0).abs() < 1e-4);
    }
}

#[test]
fn backward_examples_and_contracts() {
    let x0 = randn(&[2, 3], 8);
    let mut t = Tape::new();
    let x = t.leaf(x0.clone(), true);
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|g| *g == 1.0));

    let mut t = Tape::new();
    let x = t.leaf(x0.clone(), true);
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    for (g, v) in t.grad(x).unwrap().iter().zip(x0.data()) {
        assert_eq!(*g, 2.0 * v);
    }
    assert!(matches!(t.backward(sq), Err(Error::Contract(_))));
    assert!(Tape::new().backward(s).is_err());
}

#[test]
fn fan_out_gradients_add_up() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2], vec![1.5, -2.0]).unwrap(), true);
    let a = t.scale(x, 3.0).unwrap();
    let b = t.relu(x).unwrap();
    let c = t.add(a, b).unwrap();
    let d = t.add(c, x).unwrap();
    let s = t.sum(d).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), [5.0, 4.0]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1], vec![f64::MAX]).unwrap());
    assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let uniform = t.constant(Tensor::full(&[3, 5], 0.7));
    for eps in [0.0, 0.1, 0.5] {
        let l = t.label_smoothed_ce(uniform, &[0, 4, 2], eps).unwrap();
        assert!((t.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    }
    let z0 = randn(&[2, 3], 9);
    let z = t.constant(z0.clone());
    let l = t.label_smoothed_ce(z, &[2, 0], 0.0).unwrap();
    let mut expect = 0.0;
    for (row, label) in z0.data().chunks(3).zip([2, 0]) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        expect += lse - row[label];
    }
    assert!((t.value(l).data()[0] - expect / 2.0).abs() < 1e-12);
    let one_class = t.constant(Tensor::zeros(&[2, 1]));
    assert!(matches!(t.label_smoothed_ce(one_class, &[0, 0], 0.1), Err(Error::Config(_))));
    assert!(t.label_smoothed_ce(z, &[3, 0], 0.1).is_err());
}

#[test]
fn gradcheck_conv2d() {
    let r = check_inputs("conv2d", &[randn(&[1, 2, 4, 4], 10), randn(&[3, 2, 3, 3], 11)], OP_TOL, |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1)?;
        probe(t, y, 1)
    })
    .unwrap();
    assert_passes(r);
    let r = check_inputs("strided conv2d", &[randn(&[2, 2, 7, 6], 12), randn(&[3, 2, 3, 3], 13)], OP_TOL, |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1)?;
        probe(t, y, 2)
    })
    .unwrap();
    assert_passes(r);
}

#[test]
fn gradcheck_depthwise_and_pointwise() {
    let r = check_inputs("depthwise", &[randn(&[2, 3, 5, 4], 14), randn(&[3, 1, 3, 3], 15)], OP_TOL, |t, v| {
        let y = t.depthwise_conv2d(v[0], v[1], 1)?;
        probe(t, y, 3)
    })
    .unwrap();
    assert_passes(r);
    let r = check_inputs("pointwise", &[randn(&[2, 3, 3, 4], 16), randn(&[5, 3, 1, 1], 17)], OP_TOL, |t, v| {
        let y = t.pointwise_conv2d(v[0], v[1])?;
        probe(t, y, 4)
    })
    .unwrap();
    assert_passes(r);
}

#[test]
fn gradcheck_elementwise() {
    let inputs = [randn(&[2, 3, 3, 2], 18), randn(&[2, 3, 1, 1], 19), randn(&[2, 3, 3, 2], 20)];
    let r = check_inputs("add/mul/sub broadcast", &inputs, OP_TOL, |t, v| {
        let a = t.mul(v[0], v[1])?;
        let b = t.add(v[1], v[2])?;
        let c = t.sub(a, b)?;
        let d = t.mul(c, v[2])?;
        probe(t, d, 5)
    })
    .unwrap();
    assert_passes(r);
    let r = check_inputs("relu/sigmoid/scale/shift", &[randn(&[4, 3], 21)], OP_TOL, |t, v| {
        let a = t.relu(v[0])?;
        let b = t.sigmoid(v[0])?;
        let c = t.scale(b, -1.7)?;
        let d = t.shift(c, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2])?;
        let e = t.add(a, d)?;
        probe(t, e, 6)
    })
    .unwrap();
    assert_passes(r);
}

#[test]
fn gradcheck_pooling() {
    let r = check_inputs("max_pool", &[randn(&[2, 2, 7, 6], 22)], OP_TOL, |t, v| {
        let y = t.max_pool(v[0], 3, 2, 1)?;
        probe(t, y, 7)
    })
    .unwrap();
    assert_passes(r);
    let r = check_inputs("avg_pool + gap", &[randn(&[2, 2, 6, 4], 23)], OP_TOL, |t, v| {
        let y = t.avg_pool(v[0], 2, 2)?;
        let g = t.global_avg_pool(v[0])?;
        let a = probe(t, y, 8)?;
        let b = probe(t, g, 9)?;
        t.add(a, b)
    })
    .unwrap();
    assert_passes(r);
}

#[test]
fn gradcheck_linear_softmax_reshape() {
    let inputs = [randn(&[3, 4], 24), randn(&[5, 4], 25), randn(&[5], 26)];
    let r = check_inputs("linear", &inputs, OP_TOL, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let s = t.softmax(y)?;
        let r = t.reshape(s, &[15])?;
        probe(t, r, 10)
    })
    .unwrap();
    assert_passes(r);
}

#[test]
fn gradcheck_weighted_sum() {
    let inputs = [randn(&[2, 3], 27), randn(&[2, 3], 28), randn(&[2, 3], 29), randn(&[3], 30)];
    let r = check_inputs("weighted_sum", &inputs, OP_TOL, |t, v| {
        let y = t.weighted_sum(&v[..3], v[3])?;
        probe(t, y, 11)
    })
    .unwrap();
    assert_passes(r);
}

#[test]
fn gradcheck_normalisation() {
    let inputs = [randn(&[3, 2, 3, 3], 31), randn(&[2], 32), randn(&[2], 33)];
    let r = check_inputs("batch_norm", &inputs, OP_TOL, |t, v| {
        let mut stats = RunningStats::new("bn".into(), 2);
        let y = t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)?;
        probe(t, y, 12)
    })
    .unwrap();
    assert_passes(r);
    let r = check_inputs("batch_norm eval", &inputs, OP_TOL, |t, v| {
        let mut stats = RunningStats::new("bn".into(), 2);
        stats.mean = vec![0.3, -0.2];
        stats.var = vec![1.5, 0.7];
        let y = t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Eval)?;
        probe(t, y, 13)
    })
    .unwrap();
    assert_passes(r);
    let r = check_inputs("instance_norm", &inputs, OP_TOL, |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2])?;
        probe(t, y, 14)
    })
    .unwrap();
    assert_passes(r);
}

#[test]
fn gradcheck_cross_entropy() {
    let r = check_inputs("label_smoothed_ce", &[randn(&[4, 5], 34)], OP_TOL, |t, v| {
        t.label_smoothed_ce(v[0], &[0, 3, 4, 1], 0.1)
    })
    .unwrap();
    assert_passes(r);
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(randn(&[2, 3, 8, 6], 35));
        let w = t.constant(randn(&[4, 3, 3, 3], 36));
        let y = t.conv2d(x, w, 1, 1).unwrap();
        let y = t.max_pool(y, 3, 2, 1).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn instance_norm_is_invariant_to_channel_affine(seed in 0u64..10_000, a in 0.5f64..4.0, b in -3.0f64..3.0) {
        let x0 = randn(&[2, 3, 8, 8], seed);
        let mut styled = x0.clone();
        let scales = [a, 1.0 / a, a * 0.5 + 0.3];
        for (i, v) in styled.data_mut().iter_mut().enumerate() {
            let c = (i / 64) % 3;
            *v = scales[c] * *v + b * (c as f64 - 1.0);
        }
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones(&[3]));
        let z = t.constant(Tensor::zeros(&[3]));
        let x = t.constant(x0);
        let s = t.constant(styled);
        let y1 = t.instance_norm(x, g, z).unwrap();
        let y2 = t.instance_norm(s, g, z).unwrap();
        // Only the epsilon in the denominator breaks exact invariance.
        for (p, q) in t.value(y1).data().iter().zip(t.value(y2).data()) {
            prop_assert!((p - q).abs() < 2e-3);
        }
    }

    #[test]
    fn add_commutes_and_relu_is_idempotent(seed in 0u64..10_000) {
        let mut t = Tape::new();
        let a = t.constant(randn(&[2, 3, 2, 2], seed));
        let b = t.constant(randn(&[2, 3, 1, 1], seed + 1));
        let ab = t.add(a, b).unwrap();
        let ba = t.add(b, a).unwrap();
        prop_assert_eq!(t.value(ab), t.value(ba));
        let r = t.relu(a).unwrap();
        let rr = t.relu(r).unwrap();
        prop_assert_eq!(t.value(r), t.value(rr));
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000) {
        let mut t = Tape::new();
        let z = t.constant(randn(&[3, 4], seed));
        let s = t.softmax(z).unwrap();
        for row in t.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p > 0.0));
        }
    }
}
