use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::tensor::gradcheck::grad_check;
use xmodal::tensor::graph::BnStats;
use xmodal::tensor::spectral::power_iteration;
use xmodal::tensor::{Graph, ParamTensor, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Fixed random weights so every loss is a generic linear readout.
fn readout(g: &mut Graph<f64>, x: xmodal::tensor::Var, seed: u64) -> xmodal::tensor::Var {
    let t = g.value(x).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(t.shape(), &mut rng, 1.0);
    let wv = g.constant(w);
    let n = t.numel();
    let flat_x = g.reshape(x, &[1, n]).unwrap();
    let flat_w = g.reshape(wv, &[1, n]).unwrap();
    let d = g.row_dot(flat_x, flat_w).unwrap();
    g.mean(d)
}

fn assert_grad(report: xmodal::tensor::gradcheck::GradCheckReport, what: &str) {
    assert!(
        report.max_rel_error < 1e-4,
        "{what}: rel err {} worst {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn dense_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let w = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 7.0]);

    let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let y = g.dense(x, eye, None).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);

    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.dense(x, bad, None).is_err());
}

#[test]
fn spectral_norm_diag_effective_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamTensor::new(Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap())
        .with_spectral_norm(&mut rng, 50);
    let est = xmodal::tensor::spectral_normalize(&mut p, 1);
    let mut g = Graph::<f64>::new();
    let w = g.input(p.value.clone());
    let eff = g.spectral_norm(w, &est).unwrap();
    let d = g.value(eff).data().to_vec();
    assert!((d[0] - 1.0).abs() < 1e-9 && (d[3] - 1.0 / 3.0).abs() < 1e-9);
    assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
}

#[test]
fn spectral_norm_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = rand_tensor(&[64, 64], &mut rng, 1.0);
    let mut p = ParamTensor::new(w.clone()).with_spectral_norm(&mut rng, 0);
    let est = xmodal::tensor::spectral_normalize(&mut p, 50);
    let eff: Vec<f64> = w.data().iter().map(|v| v / est.sigma).collect();
    let m = nalgebra::DMatrix::from_row_slice(64, 64, &eff);
    let top = m.singular_values().max();
    assert!((top - 1.0).abs() < 1e-3, "top singular value {top}");
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = g.constant(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
    let y = g.conv1d(x, k, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 6.0]);

    let x = g.constant(Tensor::zeros(&[2, 8192, 1]));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = g.constant(rand_tensor(&[25, 1, 3], &mut rng, 1.0));
    let y = g.conv1d(x, k, 4).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 2048, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::zeros(&[1, 10, 1]));
    assert!(g.conv1d(x, k, 4).is_err());
}

#[test]
fn conv_transpose_shapes_and_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_tensor(&[2, 16, 5], &mut rng, 1.0));
    let k = g.constant(Tensor::zeros(&[25, 3, 5]));
    let y = g.conv_transpose1d(x, k, 4).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 64, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(&[25, 3, 4]));
    assert!(g.conv_transpose1d(x, bad, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_adjoint_identity(seed in 0u64..10_000, stride in 1usize..5, kernel in 1usize..9,
                             cin in 1usize..4, cout in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let short = 8usize;
        let long = short * stride;
        let x = rand_tensor(&[2, long, cin], &mut rng, 1.0);
        let y = rand_tensor(&[2, short, cout], &mut rng, 1.0);
        let k = rand_tensor(&[kernel, cin, cout], &mut rng, 1.0);
        let mut g = Graph::<f64>::new();
        let (xv, yv, kv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(k));
        let cx = g.conv1d(xv, kv, stride).unwrap();
        let ty = g.conv_transpose1d(yv, kv, stride).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-5 * (1.0 + lhs.abs()));
    }

    #[test]
    fn batch_norm_standardizes(seed in 0u64..10_000, shift in -5.0f64..5.0, spread in 1.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rand_tensor(&[4, 6, 3], &mut rng, 1.0);
        x.data_mut().iter_mut().for_each(|v| *v = *v * spread + shift);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[2, 3], 1.0));
        let beta = g.constant(Tensor::zeros(&[2, 3]));
        let (y, stats) = g.batch_norm(xv, gamma, beta, &[0, 1, 0, 1], BnStats::Batch, 1e-5).unwrap();
        prop_assert!(stats.is_some());
        let yd = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = yd.iter().skip(c).step_by(3).copied().collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn tanh_range(v in -1e3f64..1e3) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(v));
        let y = g.tanh(x);
        prop_assert!(g.value(y).item().abs() <= 1.0);
    }
}

#[test]
fn conditional_shift_and_constant_channel() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2, 3, 1], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
    let gamma = g.constant(Tensor::full(&[2, 1], 1.0));
    let beta = g.constant(Tensor::new(vec![2, 1], vec![0.0, 5.0]).unwrap());
    let (y, _) = g.batch_norm(x, gamma, beta, &[0, 1], BnStats::Batch, 1e-5).unwrap();
    let yd = g.value(y).data();
    for t in 0..3 {
        assert!((yd[3 + t] - yd[t] - 5.0).abs() < 1e-12);
    }
    let c = g.constant(Tensor::full(&[2, 4, 1], 3.5));
    let beta = g.constant(Tensor::new(vec![2, 1], vec![0.25, -2.0]).unwrap());
    let (y, _) = g.batch_norm(c, gamma, beta, &[0, 1], BnStats::Batch, 1e-5).unwrap();
    let yd = g.value(y).data();
    assert!(yd[..4].iter().all(|&v| v == 0.25));
    assert!(yd[4..].iter().all(|&v| v == -2.0));
    // class id out of range
    assert!(g.batch_norm(c, gamma, beta, &[0, 2], BnStats::Batch, 1e-5).is_err());
}

#[test]
fn activations() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let y = g.leaky_relu(x, 0.2);
    assert_eq!(g.value(y).data(), &[-0.2, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let t = g.tanh(z);
    assert_eq!(g.value(t).item(), 0.0);
}

#[test]
fn phase_shuffle_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let same = g.phase_shuffle(x, &[0]).unwrap();
    assert_eq!(g.value(same).data(), &[1.0, 2.0, 3.0, 4.0]);
    let s = g.phase_shuffle(x, &[1]).unwrap();
    assert_eq!(g.value(s).data(), &[2.0, 3.0, 4.0, 3.0]);
    assert!(g.phase_shuffle(x, &[4]).is_err());
    // gradient is the transposed index map
    let w = g.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 10.0, 100.0, 1000.0]).unwrap());
    let prod = g.reshape(s, &[1, 4]).unwrap();
    let wf = g.reshape(w, &[1, 4]).unwrap();
    let d = g.row_dot(prod, wf).unwrap();
    let loss = g.mean(d);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1010.0, 100.0]);
}

#[test]
fn embedding_lookup() {
    let mut g = Graph::<f64>::new();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let table = g.input(eye);
    let row = g.gather(table, &[1]).unwrap();
    assert_eq!(g.value(row).data(), &[0.0, 1.0, 0.0]);
    let c = g.constant(Tensor::from_rows(&[vec![2.0, -1.0, 0.5]]).unwrap());
    let d = g.row_dot(row, c).unwrap();
    let loss = g.mean(d);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(table).unwrap().data(), &[0.0, 0.0, 0.0, 2.0, -1.0, 0.5, 0.0, 0.0, 0.0]);
    assert!(g.gather(table, &[3]).is_err());
}

#[test]
fn gradcheck_quadratic_and_unused_param() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&[5, 3], &mut rng, 2.0);
    let unused = rand_tensor(&[4], &mut rng, 1.0);
    let r = grad_check(|g, v| Ok(g.sum_squares(v[0])), &[a.clone()], 50, 1).unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");

    let mut g = Graph::new();
    let va = g.input(a);
    let vu = g.input(unused);
    let loss = g.sum_squares(va);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(vu).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn gradcheck_dense_leaky_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![
        rand_tensor(&[6, 5], &mut rng, 1.0),
        rand_tensor(&[5, 7], &mut rng, 1.0),
        rand_tensor(&[7], &mut rng, 1.0),
        rand_tensor(&[7, 3], &mut rng, 1.0),
    ];
    let r = grad_check(
        |g, v| {
            let h = g.dense(v[0], v[1], Some(v[2]))?;
            let h = g.leaky_relu(h, 0.2);
            let o = g.dense(h, v[3], None)?;
            Ok(readout(g, o, 5))
        },
        &inputs,
        60,
        2,
    )
    .unwrap();
    assert_grad(r, "dense-leaky-dense");
}

#[test]
fn gradcheck_conv_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![
        rand_tensor(&[2, 16, 3], &mut rng, 1.0),
        rand_tensor(&[5, 3, 4], &mut rng, 0.5),
        rand_tensor(&[7, 2, 4], &mut rng, 0.5),
    ];
    let r = grad_check(
        |g, v| {
            let h = g.conv1d(v[0], v[1], 4)?;
            let t = g.conv_transpose1d(h, v[2], 2)?;
            let t = g.tanh(t);
            Ok(readout(g, t, 9))
        },
        &inputs,
        80,
        3,
    )
    .unwrap();
    assert_grad(r, "conv/convT/tanh");
}

#[test]
fn gradcheck_batch_norm_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = vec![
        rand_tensor(&[3, 5, 2], &mut rng, 2.0),
        rand_tensor(&[3, 2], &mut rng, 1.5),
        rand_tensor(&[3, 2], &mut rng, 1.0),
    ];
    for stats in [BnStats::Batch, BnStats::Fixed { mean: vec![0.3, -0.2], var: vec![1.7, 0.4] }] {
        let r = grad_check(
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &[2, 0, 2], stats.clone(), 1e-5)?;
                Ok(readout(g, y, 4))
            },
            &inputs,
            60,
            4,
        )
        .unwrap();
        assert_grad(r, "batch norm");
    }
}

#[test]
fn gradcheck_spectral_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = rand_tensor(&[4, 3, 5], &mut rng, 1.0);
    let est = power_iteration(w.data(), w.shape(), &[0.3, -0.1, 0.5, 0.2, 0.7], 3);
    let r = grad_check(
        |g, v| {
            let e = g.spectral_norm(v[0], &est)?;
            Ok(readout(g, e, 6))
        },
        &[w],
        60,
        5,
    )
    .unwrap();
    assert_grad(r, "spectral norm");
}

#[test]
fn gradcheck_reductions_and_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = vec![
        rand_tensor(&[3, 6, 4], &mut rng, 1.0),
        rand_tensor(&[5, 4], &mut rng, 1.0),
        rand_tensor(&[3, 2], &mut rng, 1.0),
    ];
    let r = grad_check(
        |g, v| {
            let sh = g.phase_shuffle(v[0], &[1, -2, 0])?;
            let s = g.sum_time(sh)?;
            let m = g.mean_time(v[0])?;
            let e = g.gather(v[1], &[4, 0, 4])?;
            let p = g.row_dot(s, e)?;
            let n = g.l2_normalize(m)?;
            let c = g.concat(n, v[2])?;
            let c = g.scale(c, 1.5);
            let r1 = readout(g, c, 8);
            let h1 = g.hinge(p, -1.0);
            let h2 = g.hinge(p, 1.0);
            let a = g.add(r1, h1)?;
            let a = g.add(a, h2)?;
            let ce = g.softmax_cross_entropy(c, &[0, 5, 2])?;
            g.add(a, ce)
        },
        &inputs,
        80,
        6,
    )
    .unwrap();
    assert_grad(r, "reductions");
}
