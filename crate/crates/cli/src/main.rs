use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use xmodal::gan::Preset;
use xmodal_cli::commands::{self, GanRunOptions, TranslateOptions};
use xmodal_cli::config::{PipelineConfig, Stage};

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Translate source embeddings into audio clips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's artifact root.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self, stage: Stage) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config, stage)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir.clone_from(dir);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the target corpus and the source embeddings.
    GenData(Common),
    /// Train the audio embedding and fix the metric normalization.
    TrainMetric(Common),
    /// Train the pitch and family classifiers used for scoring.
    TrainClassifiers(Common),
    /// Train one preset, resuming from its latest checkpoint.
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "geo+aux")]
        preset: Preset,
        /// Stop after this many generator steps.
        #[arg(long)]
        until: Option<u64>,
        /// Resume even though the config changed.
        #[arg(long)]
        allow_config_change: bool,
    },
    /// Write one WAV per source vector.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "geo+aux")]
        preset: Preset,
        /// Generator checkpoint (default: the preset's latest).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Source vectors CSV (default: the held-out set).
        #[arg(long)]
        sources: Option<PathBuf>,
        /// MIDI pitch for every clip (default: uniform over the range).
        #[arg(long)]
        pitch: Option<u32>,
        /// Output directory (default: translations/<preset>).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Score a trained preset on the held-out sources.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "geo+aux")]
        preset: Preset,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            commands::gen_data(&c.load(Stage::GenData)?, c.force)?;
        }
        Command::TrainMetric(c) => {
            commands::train_metric(&c.load(Stage::TrainMetric)?, c.force)?;
        }
        Command::TrainClassifiers(c) => {
            commands::train_classifiers(&c.load(Stage::TrainClassifiers)?, c.force)?;
        }
        Command::TrainGan {
            common,
            preset,
            until,
            allow_config_change,
        } => {
            let opts = GanRunOptions {
                force: common.force,
                until,
                allow_config_change,
            };
            commands::train_gan(&common.load(Stage::TrainGan)?, preset, opts)?;
        }
        Command::Translate {
            common,
            preset,
            checkpoint,
            sources,
            pitch,
            dest,
        } => {
            let opts = TranslateOptions {
                checkpoint,
                sources,
                pitch,
                dest,
                force: common.force,
            };
            commands::translate(&common.load(Stage::Translate)?, preset, &opts)?;
        }
        Command::Evaluate {
            common,
            preset,
            checkpoint,
        } => {
            let report = commands::evaluate(
                &common.load(Stage::Evaluate)?,
                preset,
                checkpoint.as_deref(),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
