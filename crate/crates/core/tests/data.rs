use proptest::prelude::*;
use xmodal::data::*;
use xmodal::metric::{l2, Mfcc, MfccConfig};
use xmodal::tensor::Tensor;

fn write_raw(path: &std::path::Path, samples: &[i16], rate: u32, channels: u16) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn wav_scaling_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    let mut raw: Vec<i16> = (0..64000).map(|i| (i % 1000) as i16 - 500).collect();
    raw[0] = 32767;
    raw[1] = -32768;
    write_raw(&p, &raw, 16000, 1);
    let w = load_wav(&p, 8192).unwrap();
    assert_eq!(w.len(), 8192);
    assert_eq!(w.samples()[0], 32767.0 / 32768.0);
    assert_eq!(w.samples()[1], -1.0);
    for (i, &s) in w.samples().iter().enumerate().skip(2) {
        assert_eq!(s, f32::from(raw[i]) / 32768.0);
    }
}

#[test]
fn wav_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.wav");
    write_raw(&short, &[0; 100], 16000, 1);
    assert!(load_wav(&short, 8192).is_err());
    let rate = dir.path().join("rate.wav");
    write_raw(&rate, &[0; 9000], 44100, 1);
    assert!(load_wav(&rate, 8192).is_err());
    let stereo = dir.path().join("stereo.wav");
    write_raw(&stereo, &[0; 20000], 16000, 2);
    assert!(load_wav(&stereo, 8192).is_err());
    let deep = dir.path().join("deep.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(&deep, spec).unwrap();
    (0..9000).for_each(|_| w.write_sample(0.0f32).unwrap());
    w.finalize().unwrap();
    assert!(load_wav(&deep, 8192).is_err());
}

#[test]
fn wav_write_read_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.wav");
    let clip = synth_tone(1, 45, 3, &SynthConfig::default()).unwrap();
    write_wav(&p, &clip.wave).unwrap();
    let back = load_wav(&p, CLIP_LEN).unwrap();
    for (a, b) in clip.wave.samples().iter().zip(back.samples()) {
        assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-7);
    }
}

fn entry(pitch: u32, source_type: SourceType, split: Split, i: u64) -> ManifestEntry {
    ManifestEntry {
        source: ClipSource::Synth { seed: i },
        family: (i % 4) as usize,
        pitch,
        source_type,
        split,
    }
}

#[test]
fn filter_rules_examples() {
    let m = DatasetManifest {
        entries: vec![
            entry(85, SourceType::Acoustic, Split::Train, 0),
            entry(60, SourceType::Electronic, Split::Train, 1),
            entry(24, SourceType::Acoustic, Split::Train, 2),
            entry(84, SourceType::Acoustic, Split::Test, 3),
            entry(23, SourceType::Acoustic, Split::Test, 4),
        ],
        seed: 9,
    };
    let f = filter_dataset(&m, &FilterRules::default()).unwrap();
    let pitches: Vec<u32> = f.entries.iter().map(|e| e.pitch).collect();
    assert_eq!(pitches, vec![24, 84]);
    assert_eq!(filter_dataset(&f, &FilterRules::default()).unwrap(), f);
    let none = DatasetManifest {
        entries: vec![entry(85, SourceType::Acoustic, Split::Train, 0)],
        seed: 0,
    };
    assert!(filter_dataset(&none, &FilterRules::default()).is_err());
}

proptest! {
    #[test]
    fn filter_is_idempotent(spec in prop::collection::vec((0u32..128, 0usize..3, any::<bool>()), 1..60)) {
        let types = [SourceType::Acoustic, SourceType::Electronic, SourceType::Synthetic];
        let m = DatasetManifest {
            entries: spec
                .iter()
                .enumerate()
                .map(|(i, &(p, t, s))| entry(p, types[t], if s { Split::Train } else { Split::Test }, i as u64))
                .collect(),
            seed: 1,
        };
        if let Ok(once) = filter_dataset(&m, &FilterRules::default()) {
            prop_assert_eq!(filter_dataset(&once, &FilterRules::default()).unwrap(), once.clone());
            prop_assert!(once.entries.iter().all(|e| e.source_type == SourceType::Acoustic && (24..=84).contains(&e.pitch)));
        }
    }

    #[test]
    fn batches_cover_all_but_remainder(n in 1usize..300, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..50) {
        prop_assume!(bs <= n);
        let batches: Vec<Vec<usize>> = batch_iterator(n, bs, seed, epoch).unwrap().collect();
        prop_assert_eq!(batches.len(), n / bs);
        prop_assert!(batches.iter().all(|b| b.len() == bs));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), n - n % bs);
        let again: Vec<Vec<usize>> = batch_iterator(n, bs, seed, epoch).unwrap().collect();
        prop_assert_eq!(&batches, &again);
        for (b, batch) in batches.iter().enumerate() {
            let (e, idx) = nth_batch(n, bs, seed, epoch * (n / bs) as u64 + b as u64).unwrap();
            prop_assert_eq!(e, epoch);
            prop_assert_eq!(&idx, batch);
        }
    }

    #[test]
    fn synth_waveforms_valid(family in 0usize..4, pitch in 40u32..=52, seed in any::<u64>()) {
        let clip = synth_tone(family, pitch, seed, &SynthConfig::default()).unwrap();
        prop_assert_eq!(clip.wave.len(), CLIP_LEN);
        let peak = clip.wave.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        prop_assert!((peak - SYNTH_PEAK).abs() <= 1e-6);
    }
}

#[test]
fn epoch_orders_differ() {
    let a: Vec<Vec<usize>> = batch_iterator(100, 10, 4, 0).unwrap().collect();
    let b: Vec<Vec<usize>> = batch_iterator(100, 10, 4, 1).unwrap().collect();
    assert_ne!(a, b);
    assert!(batch_iterator(5, 6, 0, 0).is_err());
}

#[test]
fn sine_at_a440_peaks_at_440_hz() {
    let cfg = SynthConfig {
        min_pitch: 60,
        max_pitch: 80,
        ..Default::default()
    };
    let clip = synth_tone(0, 69, 1, &cfg).unwrap();
    let n = clip.wave.len();
    let mut buf: Vec<rustfft::num_complex::Complex<f64>> =
        clip.wave.samples().iter().map(|&v| rustfft::num_complex::Complex::new(f64::from(v), 0.0)).collect();
    rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let peak = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
    let hz = peak as f64 * f64::from(SAMPLE_RATE) / n as f64;
    assert!((hz - 440.0).abs() <= 440.0 * 0.005 + f64::from(SAMPLE_RATE) / n as f64, "peak at {hz}");
}

#[test]
fn synth_is_deterministic_and_checked() {
    let cfg = SynthConfig::default();
    assert_eq!(synth_tone(2, 47, 11, &cfg).unwrap(), synth_tone(2, 47, 11, &cfg).unwrap());
    assert_ne!(synth_tone(2, 47, 11, &cfg).unwrap(), synth_tone(2, 47, 12, &cfg).unwrap());
    assert!(synth_tone(4, 47, 0, &cfg).is_err());
    assert!(synth_tone(0, 53, 0, &cfg).is_err());
    assert!(synth_tone(0, 39, 0, &cfg).is_err());
}

#[test]
fn source_embeddings_are_unit_and_recoverable() {
    let (v, labels) = gen_source_embeddings(400, 64, 8, 0.05, 3).unwrap();
    assert!(v.iter().all(|s| (l2(&s.values, &vec![0.0f32; 64]) - 1.0).abs() < 1e-5));
    // the noise-free draw with the same seed yields the true centers
    let (exact, exact_labels) = gen_source_embeddings(400, 64, 8, 0.0, 3).unwrap();
    assert_eq!(exact_labels, labels);
    let mut cents: Vec<Option<Vec<f32>>> = vec![None; 8];
    for (s, &c) in exact.iter().zip(&labels) {
        match &cents[c] {
            Some(prev) => assert!(l2(prev, &s.values) < 1e-6),
            None => cents[c] = Some(s.values.clone()),
        }
    }
    let cents: Vec<Vec<f32>> = cents.into_iter().map(Option::unwrap).collect();
    let hits = v
        .iter()
        .zip(&labels)
        .filter(|(s, &c)| {
            let best = (0..8).min_by(|&a, &b| l2(&s.values, &cents[a]).total_cmp(&l2(&s.values, &cents[b]))).unwrap();
            best == c
        })
        .count();
    assert!(hits as f64 / v.len() as f64 >= 0.99);
    assert!(gen_source_embeddings(4, 64, 8, 0.05, 0).is_err());
    assert!(gen_source_embeddings(40, 4, 8, 0.05, 0).is_err());
}

#[test]
fn source_vec_normalizes() {
    let s = SourceVec::new(0, vec![3.0, 4.0]).unwrap();
    assert_eq!(s.values, vec![0.6, 0.8]);
    assert!(SourceVec::new(1, vec![0.0, 0.0]).is_err());
}

#[test]
fn manifest_text_round_trip_and_validation() {
    let text = "# seed 42\nsynth:1 0 40 synthetic train\nclips/a.wav 3 52 acoustic test\n";
    let m = DatasetManifest::parse(text).unwrap();
    assert_eq!(m.seed, 42);
    assert_eq!(m.entries[1].source, ClipSource::Path("clips/a.wav".into()));
    assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    m.validate().unwrap();
    assert_eq!(m.split(Split::Test).len(), 1);
    assert!(DatasetManifest::parse("synth:1 0 forty synthetic train\n").is_err());
    assert!(DatasetManifest::default().validate().is_err());
    assert!(DatasetManifest::parse("synth:1 0 40 synthetic train\nsynth:1 0 40 synthetic test\n").is_err());
}

#[test]
fn families_are_separable_under_mfcc() {
    let cfg = SynthConfig::default();
    let clips: Vec<LabeledClip> = (0..200u64)
        .map(|i| synth_tone((i % 4) as usize, 40 + (i as u32 * 5) % 13, 1000 + i, &cfg).unwrap())
        .collect();
    let data = clips.iter().flat_map(|c| c.wave.samples().iter().copied()).collect();
    let x = Tensor::new(vec![200, CLIP_LEN], data).unwrap();
    let m = Mfcc::<f32>::new(MfccConfig::default()).unwrap().compute(&x).unwrap();
    let (mut intra, mut inter) = ((0.0, 0), (0.0, 0));
    for i in 0..200 {
        for j in i + 1..200 {
            let d = l2(m.row(i), m.row(j));
            if clips[i].family == clips[j].family {
                intra = (intra.0 + d, intra.1 + 1);
            } else {
                inter = (inter.0 + d, inter.1 + 1);
            }
        }
    }
    assert!(intra.0 / f64::from(intra.1) < inter.0 / f64::from(inter.1));
}
