//! On-disk layout of a pipeline run and the small file formats in it.
//!
//! ```text
//! <out_dir>/data/{manifest.txt, dataset.json, clips/, sources_train.csv, sources_heldout.csv, source_clusters.csv}
//! <out_dir>/metric/{psi.ckpt, metric.json}
//! <out_dir>/classifiers/{pitch.ckpt, family.ckpt}
//! <out_dir>/gan/<preset>/{latest.ckpt, step_NNNNNN.ckpt, log.jsonl, diverged.ckpt}
//! <out_dir>/translations/<preset>/<id>_pitch<midi>.wav
//! <out_dir>/eval/<preset>/{report.json, translated_features.csv, source_features.csv}
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use xmodal::data::{
    load_wav, ClipSource, DatasetManifest, LabeledClip, SourceVec, Split, CLIP_LEN,
};
use xmodal::eval::{ClassifierParams, LabelKind};
use xmodal::gan::Preset;
use xmodal::metric::{wave_tensor, AudioMetric, MetricStats, MfccConfig};
use xmodal::nets::{build_trunk, TrunkSpec};
use xmodal::tensor::Tensor;

use crate::checkpoint::Checkpoint;

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.txt")
    }
    pub fn dataset_info(&self) -> PathBuf {
        self.data().join("dataset.json")
    }
    pub fn sources(&self, heldout: bool) -> PathBuf {
        self.data().join(if heldout {
            "sources_heldout.csv"
        } else {
            "sources_train.csv"
        })
    }
    pub fn source_clusters(&self) -> PathBuf {
        self.data().join("source_clusters.csv")
    }
    pub fn metric(&self) -> PathBuf {
        self.root.join("metric")
    }
    pub fn psi_checkpoint(&self) -> PathBuf {
        self.metric().join("psi.ckpt")
    }
    pub fn sidecar(&self) -> PathBuf {
        self.metric().join("metric.json")
    }
    pub fn classifiers(&self) -> PathBuf {
        self.root.join("classifiers")
    }
    pub fn classifier(&self, kind: LabelKind) -> PathBuf {
        self.classifiers().join(match kind {
            LabelKind::Pitch => "pitch.ckpt",
            LabelKind::Family => "family.ckpt",
        })
    }
    pub fn gan(&self, preset: Preset) -> PathBuf {
        self.root.join("gan").join(preset.name())
    }
    pub fn latest(&self, preset: Preset) -> PathBuf {
        self.gan(preset).join("latest.ckpt")
    }
    pub fn step_checkpoint(&self, preset: Preset, step: u64) -> PathBuf {
        self.gan(preset).join(format!("step_{step:06}.ckpt"))
    }
    pub fn train_log(&self, preset: Preset) -> PathBuf {
        self.gan(preset).join("log.jsonl")
    }
    pub fn diverged(&self, preset: Preset) -> PathBuf {
        self.gan(preset).join("diverged.ckpt")
    }
    pub fn translations(&self, preset: Preset) -> PathBuf {
        self.root.join("translations").join(preset.name())
    }
    pub fn eval(&self, preset: Preset) -> PathBuf {
        self.root.join("eval").join(preset.name())
    }
}

/// Vocabulary of the materialized corpus, read by every later stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n_families: usize,
    pub min_pitch: u32,
    pub max_pitch: u32,
    pub d_src: usize,
    pub clip_len: usize,
    pub config_hash: String,
}

impl DatasetInfo {
    pub fn n_pitch_classes(&self) -> usize {
        (self.max_pitch - self.min_pitch + 1) as usize
    }

    pub fn load(layout: &Layout) -> Result<Self> {
        read_json(&layout.dataset_info()).context("corpus missing; run gen-data first")
    }
}

/// Everything about the audio metric that later stages must reuse as is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSidecar {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Pairwise-distance statistics of the training source embeddings.
    pub stats_x: MetricStats,
    /// Pairwise-distance statistics of the training clips under the metric.
    pub stats_y: MetricStats,
    pub psi_dim: usize,
    pub feature_dim: usize,
    pub mfcc: MfccConfig,
    pub psi_checkpoint: String,
    pub config_hash: String,
}

impl MetricSidecar {
    pub fn load(layout: &Layout) -> Result<Self> {
        read_json(&layout.sidecar()).context("audio metric missing; run train-metric first")
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates `dir`; an existing one is an error unless `force`, which clears it.
pub fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            bail!(
                "{} already exists (use --force to overwrite)",
                dir.display()
            );
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `id,v0,...,v{d-1}` rows.
pub fn write_sources(path: &Path, sources: &[SourceVec]) -> Result<()> {
    let d = sources.first().map_or(0, |s| s.values.len());
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|j| format!("v{j}")));
    w.write_record(&header)?;
    for s in sources {
        let mut row = vec![s.id.to_string()];
        row.extend(s.values.iter().map(f32::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sources(path: &Path) -> Result<Vec<SourceVec>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let d = r.headers()?.len().saturating_sub(1);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        ensure!(
            rec.len() == d + 1,
            "{} row {} has {} fields",
            path.display(),
            i + 1,
            rec.len()
        );
        let id = rec[0]
            .parse()
            .with_context(|| format!("{} row {}: id", path.display(), i + 1))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{} row {}", path.display(), i + 1))?;
        let norm = values
            .iter()
            .map(|&v| f64::from(v).powi(2))
            .sum::<f64>()
            .sqrt();
        ensure!(
            (norm - 1.0).abs() < 1e-5,
            "{} row {}: norm {norm} is not 1",
            path.display(),
            i + 1
        );
        out.push(SourceVec { id, values });
    }
    ensure!(
        !out.is_empty(),
        "{} holds no source vectors",
        path.display()
    );
    Ok(out)
}

/// Target clips of one split, loaded through the manifest.
pub struct Corpus {
    pub clips: Vec<LabeledClip>,
}

impl Corpus {
    pub fn load(layout: &Layout, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(layout.manifest())
            .context("corpus missing; run gen-data first")?;
        let manifest = DatasetManifest::parse(&text)?;
        manifest.validate()?;
        let mut clips = Vec::new();
        for e in manifest.split(split).entries {
            let ClipSource::Path(rel) = &e.source else {
                bail!("manifest entry {} is not materialized", e.source);
            };
            let wave = load_wav(&layout.data().join(rel), CLIP_LEN)?;
            clips.push(LabeledClip {
                wave,
                family: e.family,
                pitch: e.pitch,
                source_type: e.source_type,
            });
        }
        ensure!(!clips.is_empty(), "no {split} clips in the manifest");
        Ok(Self { clips })
    }

    pub fn waves(&self) -> Result<Tensor<f32>> {
        Ok(wave_tensor(self.clips.iter().map(|c| c.wave.samples()))?)
    }

    pub fn families(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.family).collect()
    }

    pub fn pitch_classes(&self, info: &DatasetInfo) -> Vec<usize> {
        self.clips
            .iter()
            .map(|c| (c.pitch - info.min_pitch) as usize)
            .collect()
    }
}

pub fn save_psi(
    path: &Path,
    spec: &TrunkSpec,
    net: &xmodal::tensor::NetParams<f32>,
    config_hash: &str,
) -> Result<()> {
    let mut ck =
        Checkpoint::new(json!({ "kind": "psi", "spec": spec, "config_hash": config_hash }));
    ck.insert_net("psi", net)?;
    ck.save(path)
}

/// The frozen audio metric rebuilt from its checkpoint and sidecar.
pub fn load_metric(layout: &Layout) -> Result<(AudioMetric<f32>, MetricSidecar)> {
    let side = MetricSidecar::load(layout)?;
    let ck = Checkpoint::load(&layout.metric().join(&side.psi_checkpoint))?;
    ensure!(
        ck.field::<String>("kind")? == "psi",
        "not an embedding checkpoint"
    );
    let spec: TrunkSpec = ck.field("spec")?;
    let mut net = build_trunk::<f32>(&spec, 0)?;
    ck.restore_net("psi", &mut net)?;
    let metric = AudioMetric::new(net, spec, side.mfcc.clone(), side.lambda1, side.lambda2)?;
    ensure!(
        metric.dim() == side.feature_dim,
        "sidecar feature dim disagrees with the checkpoint"
    );
    Ok((metric, side))
}

pub fn save_classifier(path: &Path, cls: &ClassifierParams, config_hash: &str) -> Result<()> {
    let mut ck = Checkpoint::new(json!({
        "kind": "classifier",
        "label": cls.kind,
        "spec": cls.spec,
        "held_out_accuracy": cls.held_out_accuracy,
        "config_hash": config_hash,
    }));
    ck.insert_net("cls", &cls.net)?;
    ck.save(path)
}

pub fn load_classifier(layout: &Layout, kind: LabelKind) -> Result<ClassifierParams> {
    let ck = Checkpoint::load(&layout.classifier(kind))
        .context("classifiers missing; run train-classifiers first")?;
    ensure!(
        ck.field::<String>("kind")? == "classifier",
        "not a classifier checkpoint"
    );
    ensure!(
        ck.field::<LabelKind>("label")? == kind,
        "classifier label kind mismatch"
    );
    let spec: TrunkSpec = ck.field("spec")?;
    let mut net = build_trunk::<f32>(&spec, 0)?;
    ck.restore_net("cls", &mut net)?;
    Ok(ClassifierParams {
        net,
        spec,
        kind,
        held_out_accuracy: ck.field("held_out_accuracy")?,
    })
}
