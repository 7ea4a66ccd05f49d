//! Flat pipeline configuration: one TOML file for every stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xmodal::data::SynthConfig;
use xmodal::eval::{AssignRule, ClassifierConfig};
use xmodal::gan::{Preset, TrainConfig};
use xmodal::metric::TripletConfig;
use xmodal::tensor::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Artifact root; not part of the hash.
    pub out_dir: PathBuf,

    pub n_families: usize,
    pub min_pitch: u32,
    pub max_pitch: u32,
    pub clips_per_family_train: usize,
    pub clips_per_family_test: usize,

    pub d_src: usize,
    pub src_clusters: usize,
    pub src_train: usize,
    pub src_heldout: usize,
    pub src_noise_std: f64,

    pub channel_mult: usize,
    pub psi_dim: usize,
    pub triplet_margin: f64,
    pub triplet_batch: usize,
    pub triplet_epochs: usize,
    pub triplet_lr: f64,

    pub classifier_batch: usize,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,

    pub lambda_metric: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub g_steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_epochs: u64,
    pub sn_power_iters: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,

    pub assign_rule: AssignRule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let opt = OptimizerConfig::default();
        let triplet = TripletConfig::default();
        let cls = ClassifierConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            n_families: synth.n_families,
            min_pitch: synth.min_pitch,
            max_pitch: synth.max_pitch,
            clips_per_family_train: 256,
            clips_per_family_test: 64,
            d_src: 64,
            src_clusters: 8,
            src_train: 2048,
            src_heldout: 512,
            src_noise_std: 0.05,
            channel_mult: 8,
            psi_dim: 128,
            triplet_margin: triplet.margin,
            triplet_batch: triplet.batch_size,
            triplet_epochs: 8,
            triplet_lr: triplet.optimizer.lr0,
            classifier_batch: cls.batch_size,
            classifier_epochs: 4,
            classifier_lr: cls.optimizer.lr0,
            lambda_metric: train.lambda_metric,
            n_critic: train.n_critic,
            batch_size: 8,
            g_steps: train.g_steps,
            lr: opt.lr0,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            lr_decay_rate: opt.decay_rate,
            lr_decay_epochs: opt.decay_steps,
            sn_power_iters: train.sn_power_iters,
            log_every: train.log_every,
            checkpoint_every: 500,
            assign_rule: AssignRule::Centroid,
        }
    }
}

/// The pipeline stages, each with the keys its config must spell out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainMetric,
    TrainClassifiers,
    TrainGan,
    Translate,
    Evaluate,
}

impl Stage {
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            Self::GenData => &[
                "seed",
                "n_families",
                "min_pitch",
                "max_pitch",
                "clips_per_family_train",
                "clips_per_family_test",
                "d_src",
                "src_clusters",
                "src_train",
                "src_heldout",
                "src_noise_std",
            ],
            Self::TrainMetric => &[
                "seed",
                "channel_mult",
                "psi_dim",
                "triplet_margin",
                "triplet_batch",
                "triplet_epochs",
                "triplet_lr",
            ],
            Self::TrainClassifiers => &[
                "seed",
                "channel_mult",
                "classifier_batch",
                "classifier_epochs",
                "classifier_lr",
            ],
            Self::TrainGan => &[
                "seed",
                "channel_mult",
                "lambda_metric",
                "n_critic",
                "batch_size",
                "g_steps",
                "lr",
                "beta1",
                "beta2",
                "adam_eps",
                "lr_decay_rate",
                "lr_decay_epochs",
                "sn_power_iters",
                "log_every",
                "checkpoint_every",
            ],
            Self::Translate => &["seed"],
            Self::Evaluate => &["seed", "assign_rule"],
        }
    }
}

impl PipelineConfig {
    /// Parses TOML text; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        let table: toml::Table = text.parse().context("config is not valid TOML")?;
        let keys = table.keys().cloned().collect();
        let cfg: Self = table.try_into().context("invalid config")?;
        Ok((cfg, keys))
    }

    /// Loads `path` and checks that `stage` finds every key it needs.
    pub fn load(path: &Path, stage: Stage) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let (cfg, keys) = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let missing: Vec<&str> = stage
            .required_keys()
            .iter()
            .copied()
            .filter(|k| !keys.iter().any(|p| p == k))
            .collect();
        if !missing.is_empty() {
            bail!(
                "{} lacks keys required by this command: {}",
                path.display(),
                missing.join(", ")
            );
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_families < 2 || self.min_pitch > self.max_pitch {
            bail!("need two families and min_pitch <= max_pitch");
        }
        if self.clips_per_family_train < 2 || self.clips_per_family_test < 1 {
            bail!("too few clips per family");
        }
        if self.src_train < 3 || self.src_heldout < 3 || self.src_clusters == 0 {
            bail!("too few source embeddings");
        }
        self.train_config(Preset::GeoAux).validate()?;
        self.triplet_config().validate()?;
        self.classifier_config().optimizer.validate()?;
        if self.checkpoint_every == 0 || self.classifier_batch == 0 || self.classifier_epochs == 0 {
            bail!("checkpoint_every, classifier_batch and classifier_epochs must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, without `out_dir`.
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_families: self.n_families,
            min_pitch: self.min_pitch,
            max_pitch: self.max_pitch,
            ..SynthConfig::default()
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr0: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            decay_rate: self.lr_decay_rate,
            decay_steps: self.lr_decay_epochs,
        }
    }

    pub fn train_config(&self, preset: Preset) -> TrainConfig {
        TrainConfig {
            lambda_metric: self.lambda_metric,
            n_critic: self.n_critic,
            batch_size: self.batch_size,
            optimizer: self.optimizer(),
            seed: self.seed ^ seeds::GAN,
            g_steps: self.g_steps,
            log_every: self.log_every,
            sn_power_iters: self.sn_power_iters,
            ..TrainConfig::default()
        }
        .with_preset(preset)
    }

    pub fn triplet_config(&self) -> TripletConfig {
        let d = TripletConfig::default();
        TripletConfig {
            margin: self.triplet_margin,
            batch_size: self.triplet_batch,
            epochs: self.triplet_epochs,
            seed: self.seed ^ seeds::PSI,
            optimizer: OptimizerConfig {
                lr0: self.triplet_lr,
                ..d.optimizer
            },
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        let d = ClassifierConfig::default();
        ClassifierConfig {
            batch_size: self.classifier_batch,
            epochs: self.classifier_epochs,
            seed: self.seed ^ seeds::CLASSIFIER,
            optimizer: OptimizerConfig {
                lr0: self.classifier_lr,
                ..d.optimizer
            },
        }
    }
}

/// Offsets that give every stage its own random stream.
pub mod seeds {
    pub const DATA: u64 = 0x6461_7461;
    pub const SOURCE: u64 = 0x7372_6373;
    pub const PSI: u64 = 0x7073_6900;
    pub const CLASSIFIER: u64 = 0x636c_7300;
    pub const GAN: u64 = 0x6761_6e00;
    pub const EVAL: u64 = 0x6576_616c;
    pub const TRANSLATE: u64 = 0x7472_6e73;
}
