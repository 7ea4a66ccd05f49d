use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::gan::{loss_d_total, loss_g_total, metric_loss};
use xmodal::metric::{batch_all_triplet, AudioMetric, Mfcc, MfccConfig, MetricStats};
use xmodal::nets::{
    aux_discriminator_forward, build_aux_discriminator, build_discriminator, build_trunk, discriminator_forward, Ctx,
    AuxDiscriminatorSpec, DiscriminatorSpec, TrunkHead, TrunkSpec,
};
use xmodal::tensor::gradcheck::{grad_check, GradCheckReport};
use xmodal::tensor::{Graph, Tensor};

const PROBES: usize = 60;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn assert_grad(report: GradCheckReport, what: &str) {
    assert!(report.probes >= 50);
    assert!(report.max_rel_error < 1e-4, "{what}: rel err {} worst {:?}", report.max_rel_error, report.worst);
}

fn stats(mu: f64, sigma: f64) -> MetricStats {
    MetricStats { mu, sigma, n_pairs: 3 }
}

fn small_metric() -> AudioMetric<f64> {
    let spec = TrunkSpec::desk(2, 8, TrunkHead::Normalized);
    let psi = build_trunk::<f32>(&spec, 5).unwrap();
    AudioMetric::new(psi, spec, MfccConfig::default(), 0.7, 0.01).unwrap().cast().unwrap()
}

#[test]
fn mfcc_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 8192], &mut rng, 0.5);
    let mfcc = Mfcc::<f64>::new(MfccConfig::default()).unwrap();
    let w = rand_tensor(&[2, 377], &mut rng, 1.0);
    let report = grad_check(
        |g, v| {
            let m = mfcc.apply(g, v[0])?;
            let wv = g.constant(w.clone());
            let d = g.row_dot(m, wv)?;
            Ok(g.mean(d))
        },
        &[x],
        PROBES,
        2,
    )
    .unwrap();
    assert_grad(report, "mfcc");
}

#[test]
fn triplet_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = rand_tensor(&[6, 5], &mut rng, 1.0);
    let labels = [0, 0, 1, 1, 2, 2];
    let report = grad_check(|g, v| batch_all_triplet(g, v[0], &labels, 1.0), &[e], PROBES, 4).unwrap();
    assert_grad(report, "triplet");
}

#[test]
fn metric_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = rand_tensor(&[5, 7], &mut rng, 1.0);
    let src: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..2.0)).collect();
    let report = grad_check(
        |g, v| metric_loss(g, &src, v[0], &stats(1.0, 0.4), &stats(1.5, 0.6)),
        &[f],
        PROBES,
        6,
    )
    .unwrap();
    assert_grad(report, "metric loss");
}

/// Generator total through both critics and the metric, probed on the
/// waveform the generator would emit.
#[test]
fn generator_total_through_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[3, 8192, 1], &mut rng, 0.5);
    let d_spec = DiscriminatorSpec::desk(2, 3);
    let d1 = build_discriminator::<f32>(&d_spec, 8).unwrap().cast::<f64>();
    let metric = small_metric();
    let aux_spec = AuxDiscriminatorSpec::new(metric.dim());
    let d2 = build_aux_discriminator::<f64>(&aux_spec, 9).unwrap();
    let src = [0.4, 1.1, 0.9];
    let pitch = [0, 2, 1];
    let report = grad_check(
        |g, v| {
            let (mut d1, mut d2, mut metric) = (d1.clone(), d2.clone(), metric.cast::<f64>()?);
            let mut prng = ChaCha8Rng::seed_from_u64(10);
            let mut ctx = Ctx::check(g);
            let s1 = discriminator_forward(&mut ctx, &mut d1, &d_spec, v[0], &pitch, &mut prng)?;
            let phi = metric.apply(g, v[0])?;
            let mut ctx = Ctx::check(g);
            let s2 = aux_discriminator_forward(&mut ctx, &mut d2, &aux_spec, phi)?;
            let ml = metric_loss(g, &src, phi, &stats(0.8, 0.3), &stats(0.5, 0.2))?;
            loss_g_total(g, s1, Some(s2), Some(ml), 10.0)
        },
        &[x],
        PROBES,
        11,
    )
    .unwrap();
    assert_grad(report, "generator total");
}

/// Critic total on real and fake waveforms, the feature critic seeing
/// their metric features.
#[test]
fn discriminator_total_through_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let real = rand_tensor(&[2, 8192, 1], &mut rng, 0.5);
    let fake = rand_tensor(&[2, 8192, 1], &mut rng, 0.5);
    let d_spec = DiscriminatorSpec::desk(2, 3);
    let d1 = build_discriminator::<f32>(&d_spec, 13).unwrap().cast::<f64>();
    let metric = small_metric();
    let aux_spec = AuxDiscriminatorSpec::new(metric.dim());
    let d2 = build_aux_discriminator::<f64>(&aux_spec, 14).unwrap();
    let report = grad_check(
        |g, v| {
            let (mut d1, mut d2, mut metric) = (d1.clone(), d2.clone(), metric.cast::<f64>()?);
            let mut prng = ChaCha8Rng::seed_from_u64(15);
            let mut ctx = Ctx::check(g);
            let r1 = discriminator_forward(&mut ctx, &mut d1, &d_spec, v[0], &[0, 1], &mut prng)?;
            let f1 = discriminator_forward(&mut ctx, &mut d1, &d_spec, v[1], &[2, 0], &mut prng)?;
            let pr = metric.apply(g, v[0])?;
            let pf = metric.apply(g, v[1])?;
            let mut ctx = Ctx::check(g);
            let r2 = aux_discriminator_forward(&mut ctx, &mut d2, &aux_spec, pr)?;
            let f2 = aux_discriminator_forward(&mut ctx, &mut d2, &aux_spec, pf)?;
            loss_d_total(g, r1, f1, Some((r2, f2)))
        },
        &[real, fake],
        PROBES,
        16,
    )
    .unwrap();
    assert_grad(report, "discriminator total");
}

#[test]
fn loss_totals_compose() {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
    let t = g.constant(Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap());
    let m = g.constant(Tensor::scalar(0.5));
    let total = loss_g_total(&mut g, s, Some(t), Some(m), 10.0).unwrap();
    assert!((g.value(total).item() - (-2.0 + 0.0 + 5.0)).abs() < 1e-12);
    let only_adv = loss_g_total(&mut g, s, None, None, 10.0).unwrap();
    assert!((g.value(only_adv).item() + 2.0).abs() < 1e-12);
}
