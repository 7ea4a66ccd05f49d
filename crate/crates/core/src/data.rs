//! Datasets: WAV I/O, the plain-text manifest, filtering rules, synthetic
//! tones and clustered source embeddings, and seeded mini-batch order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_LEN: usize = 8192;

/// Peak amplitude of synthesized tones.
pub const SYNTH_PEAK: f32 = 0.9;

/// Fixed-length mono clip with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        if let Some(v) = samples.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("sample {v} outside [-1, 1]")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }
}

/// Recording origin of a clip; only acoustic clips survive filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceType {
    Acoustic,
    Electronic,
    Synthetic,
}

impl fmt::Display for SourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Acoustic => "acoustic",
            Self::Electronic => "electronic",
            Self::Synthetic => "synthetic",
        })
    }
}

impl FromStr for SourceType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "acoustic" => Ok(Self::Acoustic),
            "electronic" => Ok(Self::Electronic),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(format!("unknown source type {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// A target-domain clip with its family and pitch labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub wave: Waveform,
    pub family: usize,
    pub pitch: u32,
    pub source_type: SourceType,
}

/// Unit-norm source embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceVec {
    pub id: usize,
    pub values: Vec<f32>,
}

impl SourceVec {
    /// Normalizes `values` to unit length.
    pub fn new(id: usize, mut values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Degenerate(format!("source vector {id} has norm {norm}")));
        }
        for v in &mut values {
            *v = (f64::from(*v) / norm) as f32;
        }
        Ok(Self { id, values })
    }
}

fn wav_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a 16 kHz mono 16-bit PCM file, keeping the first `len` samples.
pub fn load_wav(path: &Path, len: usize) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(path, format!("sample rate {} (expected {SAMPLE_RATE})", spec.sample_rate)));
    }
    if spec.channels != 1 {
        return Err(wav_err(path, format!("{} channels (expected mono)", spec.channels)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_err(path, format!("{}-bit {:?} samples (expected 16-bit PCM)", spec.bits_per_sample, spec.sample_format)));
    }
    if (reader.duration() as usize) < len {
        return Err(wav_err(path, format!("{} samples, need at least {len}", reader.duration())));
    }
    let samples = reader
        .samples::<i16>()
        .take(len)
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e.to_string()))?;
    Waveform::new(samples)
}

/// Writes a 16 kHz mono 16-bit PCM file (samples rounded, 1.0 saturates).
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for &s in wave.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_err(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e.to_string()))
}

/// Where a manifest entry's audio comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClipSource {
    Path(String),
    /// Synthesized on demand from `(family, pitch, seed)`.
    Synth { seed: u64 },
}

impl fmt::Display for ClipSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Path(p) => f.write_str(p),
            Self::Synth { seed } => write!(f, "synth:{seed}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source: ClipSource,
    pub family: usize,
    pub pitch: u32,
    pub source_type: SourceType,
    pub split: Split,
}

/// Ordered list of clips.
///
/// Text form: one entry per line, whitespace separated
/// `path_or_synth family pitch source_type split`, where `path_or_synth` is
/// a path relative to the manifest or `synth:<seed>`. Lines starting with
/// `#` are comments; a `# seed <n>` comment records the generation seed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let bad = |reason: String| Error::Manifest { line: i + 1, reason };
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(seed) = rest.trim().strip_prefix("seed ") {
                    m.seed = seed.trim().parse().map_err(|e| bad(format!("seed: {e}")))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [src, family, pitch, kind, split] = fields[..] else {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            };
            let source = match src.strip_prefix("synth:") {
                Some(seed) => ClipSource::Synth {
                    seed: seed.parse().map_err(|e| bad(format!("synth seed: {e}")))?,
                },
                None => ClipSource::Path(src.to_string()),
            };
            m.entries.push(ManifestEntry {
                source,
                family: family.parse().map_err(|e| bad(format!("family: {e}")))?,
                pitch: pitch.parse().map_err(|e| bad(format!("pitch: {e}")))?,
                source_type: kind.parse().map_err(bad)?,
                split: split.parse().map_err(bad)?,
            });
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# path_or_synth family pitch source_type split\n# seed {}\n", self.seed);
        for e in &self.entries {
            out.push_str(&format!("{} {} {} {} {}\n", e.source, e.family, e.pitch, e.source_type, e.split));
        }
        out
    }

    /// Non-empty, and no clip listed under both splits.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Degenerate("manifest has no entries".into()));
        }
        let mut seen = std::collections::HashMap::new();
        for e in &self.entries {
            let key = match &e.source {
                ClipSource::Path(p) => p.clone(),
                ClipSource::Synth { seed } => format!("synth:{seed}:{}:{}", e.family, e.pitch),
            };
            if let Some(&other) = seen.get(&key) {
                if other != e.split {
                    return Err(Error::Degenerate(format!("{key} appears in both splits")));
                }
            }
            seen.insert(key, e.split);
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            seed: self.seed,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    pub min_pitch: u32,
    pub max_pitch: u32,
    pub source_type: SourceType,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_pitch: 24,
            max_pitch: 84,
            source_type: SourceType::Acoustic,
        }
    }
}

/// Keeps entries of the required source type whose pitch lies in the
/// inclusive range, in manifest order.
pub fn filter_dataset(manifest: &DatasetManifest, rules: &FilterRules) -> Result<DatasetManifest> {
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.source_type == rules.source_type && (rules.min_pitch..=rules.max_pitch).contains(&e.pitch))
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(Error::Degenerate("filter removed every entry".into()));
    }
    Ok(DatasetManifest {
        entries,
        seed: manifest.seed,
    })
}

/// Vocabulary of the synthetic target domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_families: usize,
    pub min_pitch: u32,
    pub max_pitch: u32,
    pub length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_families: 4,
            min_pitch: 40,
            max_pitch: 52,
            length: CLIP_LEN,
        }
    }
}

impl SynthConfig {
    pub fn n_pitches(&self) -> usize {
        (self.max_pitch - self.min_pitch + 1) as usize
    }
}

pub fn midi_to_hz(pitch: u32) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

/// `(frequency ratio, amplitude)` partials and envelope decay rate (1/s).
fn family_profile(family: usize) -> (Vec<(f64, f64)>, f64) {
    match family {
        0 => (vec![(1.0, 1.0)], 2.0),
        1 => ((1..=8).map(|h| (h as f64, 1.0 / h as f64)).collect(), 2.0),
        2 => ((1..=8).step_by(2).map(|h| (h as f64, 1.0 / h as f64)).collect(), 2.0),
        _ => (vec![(1.0, 1.0), (2.76, 0.5), (5.40, 0.25)], 12.0),
    }
}

/// Additive-synthesis tone for `(family, pitch)`; the seed sets a detune of
/// at most 0.5% and the partial phases.
pub fn synth_tone(family: usize, pitch: u32, seed: u64, cfg: &SynthConfig) -> Result<LabeledClip> {
    if family >= cfg.n_families || family > 3 {
        return Err(Error::InvalidArgument(format!("family {family} outside [0, {})", cfg.n_families.min(4))));
    }
    if !(cfg.min_pitch..=cfg.max_pitch).contains(&pitch) {
        return Err(Error::InvalidArgument(format!("pitch {pitch} outside [{}, {}]", cfg.min_pitch, cfg.max_pitch)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let detune = 1.0 + rng.random_range(-0.005..=0.005);
    let f0 = midi_to_hz(pitch) * detune;
    let (partials, decay) = family_profile(family);
    let phases: Vec<f64> = partials.iter().map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let nyquist = f64::from(SAMPLE_RATE) / 2.0;
    let sr = f64::from(SAMPLE_RATE);
    let raw: Vec<f64> = (0..cfg.length)
        .map(|n| {
            let t = n as f64 / sr;
            let tone: f64 = partials
                .iter()
                .zip(&phases)
                .filter(|((r, _), _)| r * f0 < nyquist)
                .map(|(&(r, a), &ph)| a * (std::f64::consts::TAU * r * f0 * t + ph).sin())
                .sum();
            tone * (-decay * t).exp()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Degenerate("silent tone".into()));
    }
    let samples = raw.iter().map(|v| (v * f64::from(SYNTH_PEAK) / peak) as f32).collect();
    Ok(LabeledClip {
        wave: Waveform::new(samples)?,
        family,
        pitch,
        source_type: SourceType::Synthetic,
    })
}

/// Clustered unit vectors: centers uniform on the sphere, each sample the
/// normalized sum of its center and isotropic Gaussian noise. Returns the
/// vectors and their latent cluster labels.
pub fn gen_source_embeddings(
    n: usize,
    d_src: usize,
    n_clusters: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Vec<SourceVec>, Vec<usize>)> {
    if n_clusters == 0 || n_clusters > n || d_src < n_clusters {
        return Err(Error::InvalidArgument(format!(
            "need 0 < n_clusters ({n_clusters}) <= n ({n}) and <= d_src ({d_src})"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| {
            let v: Vec<f64> = (0..d_src).map(|_| gauss(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for id in 0..n {
        let c = rng.random_range(0..n_clusters);
        let v: Vec<f64> = centers[c].iter().map(|&x| x + noise_std * gauss(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(SourceVec {
            id,
            values: v.iter().map(|x| (x / norm) as f32).collect(),
        });
        labels.push(c);
    }
    Ok((out, labels))
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Index batches of one epoch; the trailing partial batch is dropped.
pub fn batch_iterator(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<impl Iterator<Item = Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} for {n} items")));
    }
    let order = epoch_order(n, seed, epoch);
    Ok((0..n / batch_size).map(move |b| order[b * batch_size..(b + 1) * batch_size].to_vec()))
}

/// Batch number `step` of a run that cycles through epochs of `n` items.
pub fn nth_batch(n: usize, batch_size: usize, seed: u64, step: u64) -> Result<(u64, Vec<usize>)> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} for {n} items")));
    }
    let per_epoch = (n / batch_size) as u64;
    let epoch = step / per_epoch;
    let b = (step % per_epoch) as usize;
    let order = epoch_order(n, seed, epoch);
    Ok((epoch, order[b * batch_size..(b + 1) * batch_size].to_vec()))
}
