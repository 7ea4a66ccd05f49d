use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::data::{synth_tone, LabeledClip, SynthConfig, CLIP_LEN};
use xmodal::eval::silhouette_value;
use xmodal::metric::*;
use xmodal::nets::{build_trunk, TrunkHead, TrunkSpec};
use xmodal::tensor::Tensor;

fn frames(m: &Tensor<f32>) -> Vec<&[f32]> {
    m.data().chunks(13).collect()
}

#[test]
fn mfcc_reference_shape_and_silence() {
    let mfcc = Mfcc::<f32>::new(MfccConfig::default()).unwrap();
    let m = mfcc.compute(&Tensor::zeros(&[2, CLIP_LEN, 1])).unwrap();
    assert_eq!(m.shape(), &[2, 377]);
    let f = frames(&m);
    assert!(f.iter().all(|fr| fr == &f[0]));
    assert!(mfcc.compute(&Tensor::zeros(&[1, 8000])).is_err());
}

#[test]
fn mfcc_sine_is_stationary() {
    let mfcc = Mfcc::<f64>::new(MfccConfig::default()).unwrap();
    let x = Tensor::new(
        vec![1, CLIP_LEN],
        (0..CLIP_LEN).map(|n| (std::f64::consts::TAU * 437.5 * n as f64 / 16000.0).sin() * 0.5).collect(),
    )
    .unwrap();
    let m = mfcc.compute(&x).unwrap();
    let fr: Vec<&[f64]> = m.data().chunks(13).collect();
    for a in 1..28 {
        for b in a + 1..28 {
            for (p, q) in fr[a].iter().zip(fr[b]) {
                assert!((p - q).abs() < 1e-3, "frames {a} {b}: {p} vs {q}");
            }
        }
    }
}

#[test]
fn mfcc_gain_shifts_only_c0() {
    let mfcc = Mfcc::<f64>::new(MfccConfig::default()).unwrap();
    // broadband input keeps every mel band well above the log floor
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base: Vec<f64> = (0..CLIP_LEN).map(|_| rng.random_range(-0.3..0.3)).collect();
    let x = Tensor::new(vec![1, CLIP_LEN], base.clone()).unwrap();
    let a = mfcc.compute(&x).unwrap();
    for gain in [0.25, 0.5, 2.0] {
        let y = Tensor::new(vec![1, CLIP_LEN], base.iter().map(|v| v * gain).collect()).unwrap();
        let b = mfcc.compute(&y).unwrap();
        let expect = 2.0 * f64::ln(gain) * (80f64).sqrt();
        for (fa, fb) in a.data().chunks(13).zip(b.data().chunks(13)) {
            assert!((fb[0] - fa[0] - expect).abs() < 1e-3);
            for k in 1..13 {
                assert!((fb[k] - fa[k]).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn triplet_examples() {
    let a = [1.0f32, 0.0];
    let n = [-1.0f32, 0.0];
    assert_eq!(triplet_loss(&a, &a, &n, 1.0), 0.0);
    assert_eq!(triplet_loss(&a, &a, &a, 1.0), 1.0);
    let p = [0.0f32, 0.0];
    let n2 = [2.0f32, 0.0];
    assert_eq!(triplet_loss(&a, &p, &n2, 1.0), 1.0);
}

proptest! {
    #[test]
    fn triplet_zero_iff_margin_met(v in prop::collection::vec(-1.0f32..1.0, 9), margin in 0.1f64..2.0) {
        let (a, p, n) = (&v[0..3], &v[3..6], &v[6..9]);
        let l = triplet_loss(a, p, n, margin);
        prop_assert!(l >= 0.0);
        let gap = l2(a, n).powi(2) - l2(a, p).powi(2) - margin;
        prop_assert_eq!(l == 0.0, gap >= 0.0);
    }

    #[test]
    fn stats_translation_invariant(pts in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3), 3..12),
                                   shift in prop::collection::vec(-3.0f32..3.0, 3)) {
        let Ok(s) = pairwise_stats(&pts) else { return Ok(()) };
        let moved: Vec<Vec<f32>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let t = pairwise_stats(&moved).unwrap();
        prop_assert!((s.mu - t.mu).abs() < 1e-4 && (s.sigma - t.sigma).abs() < 1e-4);
        // brute-force oracle over ordered pairs
        let n = pts.len();
        let mut d = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    d.push(pts[i].iter().zip(&pts[j]).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum::<f64>().sqrt());
                }
            }
        }
        let mu = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d.len() as f64;
        prop_assert!((s.mu - mu).abs() < 1e-9 && (s.sigma - var.sqrt()).abs() < 1e-9);
        prop_assert_eq!(s.n_pairs, n * (n - 1) / 2);
    }
}

#[test]
fn pairwise_stats_on_a_line() {
    let s = pairwise_stats(&[[0.0f32], [1.0], [3.0]]).unwrap();
    assert!((s.mu - 2.0).abs() < 1e-12);
    assert!((s.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(s.n_pairs, 3);
    assert!(pairwise_stats(&[[1.0f32], [1.0], [1.0]]).is_err());
    assert!(pairwise_stats(&[[1.0f32], [2.0]]).is_err());
}

#[test]
fn norm_factor_examples() {
    let mf = [[0.0f32, 0.0], [1.0, 1.0]];
    let (l1, _) = compute_norm_factors(&[[1.0f32, 0.0], [-1.0, 0.0]], &mf).unwrap();
    assert!((l1 - 0.5).abs() < 1e-12);
    let (l1, l2v) = compute_norm_factors(&[[0.0f32], [1.0], [2.0], [5.0]], &mf).unwrap();
    assert!((l1 - 0.2).abs() < 1e-12);
    assert!((l2v - 1.0 / 2f64.sqrt()).abs() < 1e-7);
    assert!(compute_norm_factors(&[[1.0f32], [1.0]], &mf).is_err());
}

fn clips(n_per: usize, seed0: u64) -> Vec<LabeledClip> {
    let cfg = SynthConfig::default();
    (0..4 * n_per)
        .map(|i| synth_tone(i % 4, 40 + ((i * 7) % 13) as u32, seed0 + i as u64, &cfg).unwrap())
        .collect()
}

#[test]
fn scaled_components_have_unit_max_distance() {
    let set = clips(6, 100);
    let x = wave_tensor::<f32>(set.iter().map(|c| c.wave.samples())).unwrap();
    let spec = TrunkSpec::desk(2, 128, TrunkHead::Normalized);
    let psi = build_trunk::<f32>(&spec, 1).unwrap();
    let mfcc = Mfcc::<f32>::new(MfccConfig::default()).unwrap();
    let (l1, l2v) = norm_factors_for(&psi, &spec, &mfcc, &x).unwrap();
    let mut metric = AudioMetric::new(psi, spec, MfccConfig::default(), l1, l2v).unwrap();
    assert_eq!(metric.dim(), 505);
    let phi = metric.features(&x).unwrap();
    assert_eq!(phi.shape(), &[24, 505]);
    let rows = rows_of(&phi);
    let psi_part: Vec<&[f32]> = rows.iter().map(|r| &r[..128]).collect();
    let mfcc_part: Vec<&[f32]> = rows.iter().map(|r| &r[128..]).collect();
    assert!((max_pairwise_distance(&psi_part) - 1.0).abs() < 1e-5);
    assert!((max_pairwise_distance(&mfcc_part) - 1.0).abs() < 1e-5);
    for r in &psi_part {
        assert!((l2(*r, &[0.0f32; 128][..]) - l1).abs() < 1e-5 * l1.max(1.0));
    }
}

#[test]
fn feature_is_scaled_concatenation() {
    let set = clips(1, 7);
    let spec = TrunkSpec::desk(2, 16, TrunkHead::Normalized);
    let psi = build_trunk::<f32>(&spec, 2).unwrap();
    let mfcc = Mfcc::<f32>::new(MfccConfig::default()).unwrap();
    let mut stub = AudioMetric::new(psi.clone(), spec.clone(), MfccConfig::default(), 0.0, 1.0).unwrap();
    let f = stub.audio_feature(&set[0].wave).unwrap();
    let m = mfcc.compute(&wave_tensor::<f32>([set[0].wave.samples()]).unwrap()).unwrap();
    assert!(f.values[..16].iter().all(|&v| v == 0.0));
    assert_eq!(&f.values[16..], m.data());

    let (l1, l2v) = (0.3, 0.02);
    let mut metric = AudioMetric::new(psi.clone(), spec.clone(), MfccConfig::default(), l1, l2v).unwrap();
    let x = wave_tensor::<f32>(set.iter().map(|c| c.wave.samples())).unwrap();
    let phi = metric.features(&x).unwrap();
    let (_, emb) = trunk_infer(&psi, &spec, &x).unwrap();
    let mf = mfcc.compute(&x).unwrap();
    for i in 0..4 {
        for j in i + 1..4 {
            let d2 = l2(phi.row(i), phi.row(j)).powi(2);
            let want = l1 * l1 * l2(emb.row(i), emb.row(j)).powi(2) + l2v * l2v * l2(mf.row(i), mf.row(j)).powi(2);
            assert!((d2 - want).abs() < 1e-4 * want.max(1e-3));
        }
    }
}

#[test]
fn untrained_embedding_is_unit_norm() {
    let set = clips(2, 50);
    let spec = TrunkSpec::desk(2, 128, TrunkHead::Normalized);
    let psi = build_trunk::<f32>(&spec, 3).unwrap();
    let x = wave_tensor::<f32>(set.iter().map(|c| c.wave.samples())).unwrap();
    let (_, emb) = trunk_infer(&psi, &spec, &x).unwrap();
    assert!(emb.is_finite());
    for r in rows_of(&emb) {
        assert!((l2(r, &[0.0f32; 128][..]) - 1.0).abs() < 1e-5);
    }
}

#[test]
fn trained_embedding_separates_families() {
    let train = clips(64, 1);
    let test = clips(16, 10_000);
    let spec = TrunkSpec::desk(8, 128, TrunkHead::Normalized);
    let cfg = TripletConfig {
        epochs: 6,
        ..Default::default()
    };
    let (psi, trace) = train_audio_embedding(&train, &spec, &cfg).unwrap();
    assert_eq!(trace.len(), 6);
    let x = wave_tensor::<f32>(test.iter().map(|c| c.wave.samples())).unwrap();
    let (_, emb) = trunk_infer(&psi, &spec, &x).unwrap();
    let labels: Vec<usize> = test.iter().map(|c| c.family).collect();
    let sv = silhouette_value(&rows_of(&emb), &labels).unwrap();
    assert!(sv > 0.3, "held-out silhouette {sv}");
    assert!(train_audio_embedding(&train[..1], &spec, &cfg).is_err());
}
