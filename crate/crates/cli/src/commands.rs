//! The pipeline stages behind each subcommand.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use xmodal::data::{
    gen_source_embeddings, synth_tone, write_wav, ClipSource, DatasetManifest, ManifestEntry,
    Split, CLIP_LEN,
};
use xmodal::eval::{evaluate as run_eval, train_classifier, EvalInputs, EvalReport, LabelKind};
use xmodal::gan::{
    train_gan as run_gan, translate as run_translate, GanData, GanState, LogRecord, MetricTerms,
    Preset,
};
use xmodal::metric::{
    norm_factors_for, pairwise_stats, rows_of, train_audio_embedding, AudioMetric, Mfcc, MfccConfig,
};
use xmodal::nets::{AuxDiscriminatorSpec, DiscriminatorSpec, GeneratorSpec, TrunkHead, TrunkSpec};

use crate::artifacts::{
    fresh_dir, load_classifier, load_metric, read_sources, save_classifier, save_psi, write_json,
    write_sources, Corpus, DatasetInfo, Layout, MetricSidecar,
};
use crate::checkpoint::Checkpoint;
use crate::config::{seeds, PipelineConfig};

fn layout(cfg: &PipelineConfig) -> Layout {
    Layout::new(&cfg.out_dir)
}

/// Synthesizes the target corpus and the source embeddings.
pub fn gen_data(cfg: &PipelineConfig, force: bool) -> Result<DatasetInfo> {
    let lay = layout(cfg);
    fresh_dir(&lay.data(), force)?;
    let synth = cfg.synth_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ seeds::DATA);
    let mut manifest = DatasetManifest {
        entries: Vec::new(),
        seed: cfg.seed,
    };
    for (split, per_family) in [
        (Split::Train, cfg.clips_per_family_train),
        (Split::Test, cfg.clips_per_family_test),
    ] {
        std::fs::create_dir_all(lay.data().join("clips").join(split.to_string()))?;
        for family in 0..cfg.n_families {
            for i in 0..per_family {
                let pitch = rng.random_range(cfg.min_pitch..=cfg.max_pitch);
                let clip = synth_tone(family, pitch, rng.random(), &synth)?;
                let rel = format!("clips/{split}/f{family}_p{pitch}_{i:05}.wav");
                write_wav(&lay.data().join(&rel), &clip.wave)?;
                manifest.entries.push(ManifestEntry {
                    source: ClipSource::Path(rel),
                    family,
                    pitch,
                    source_type: clip.source_type,
                    split,
                });
            }
        }
    }
    manifest.validate()?;
    std::fs::write(lay.manifest(), manifest.to_text())?;

    let (all, clusters) = gen_source_embeddings(
        cfg.src_train + cfg.src_heldout,
        cfg.d_src,
        cfg.src_clusters,
        cfg.src_noise_std,
        cfg.seed ^ seeds::SOURCE,
    )?;
    write_sources(&lay.sources(false), &all[..cfg.src_train])?;
    write_sources(&lay.sources(true), &all[cfg.src_train..])?;
    let mut w = csv::Writer::from_path(lay.source_clusters())?;
    w.write_record(["id", "cluster"])?;
    for (s, c) in all.iter().zip(&clusters) {
        w.write_record([s.id.to_string(), c.to_string()])?;
    }
    w.flush()?;

    let info = DatasetInfo {
        n_families: cfg.n_families,
        min_pitch: cfg.min_pitch,
        max_pitch: cfg.max_pitch,
        d_src: cfg.d_src,
        clip_len: CLIP_LEN,
        config_hash: cfg.config_hash(),
    };
    write_json(&lay.dataset_info(), &info)?;
    eprintln!(
        "gen-data: {} clips, {} + {} source vectors in {}",
        manifest.len(),
        cfg.src_train,
        cfg.src_heldout,
        lay.data().display()
    );
    Ok(info)
}

/// Trains the embedding network and fixes the metric's normalization.
pub fn train_metric(cfg: &PipelineConfig, force: bool) -> Result<MetricSidecar> {
    let lay = layout(cfg);
    let info = DatasetInfo::load(&lay)?;
    let train = Corpus::load(&lay, Split::Train)?;
    let src = read_sources(&lay.sources(false))?;
    fresh_dir(&lay.metric(), force)?;

    let spec = TrunkSpec::desk(cfg.channel_mult, cfg.psi_dim, TrunkHead::Normalized);
    let (psi, losses) = train_audio_embedding(&train.clips, &spec, &cfg.triplet_config())?;
    let x = train.waves()?;
    let mfcc_cfg = MfccConfig::default();
    let (lambda1, lambda2) =
        norm_factors_for(&psi, &spec, &*Mfcc::<f32>::new(mfcc_cfg.clone())?, &x)?;
    let mut metric = AudioMetric::new(
        psi.clone(),
        spec.clone(),
        mfcc_cfg.clone(),
        lambda1,
        lambda2,
    )?;
    let phi = metric.features(&x)?;
    let side = MetricSidecar {
        lambda1,
        lambda2,
        stats_x: pairwise_stats(&src.iter().map(|s| s.values.as_slice()).collect::<Vec<_>>())?,
        stats_y: pairwise_stats(&rows_of(&phi))?,
        psi_dim: cfg.psi_dim,
        feature_dim: metric.dim(),
        mfcc: mfcc_cfg,
        psi_checkpoint: "psi.ckpt".into(),
        config_hash: cfg.config_hash(),
    };
    save_psi(&lay.psi_checkpoint(), &spec, &psi, &side.config_hash)?;
    write_json(&lay.sidecar(), &side)?;
    eprintln!(
        "train-metric: {} families, final triplet loss {:.4}, lambda1 {:.4}, lambda2 {:.6}",
        info.n_families,
        losses.last().copied().unwrap_or(f64::NAN),
        lambda1,
        lambda2
    );
    Ok(side)
}

/// Trains the pitch and family classifiers used by the quality scores.
/// Returns their held-out accuracies.
pub fn train_classifiers(cfg: &PipelineConfig, force: bool) -> Result<(f64, f64)> {
    let lay = layout(cfg);
    let info = DatasetInfo::load(&lay)?;
    let train = Corpus::load(&lay, Split::Train)?;
    let test = Corpus::load(&lay, Split::Test)?;
    fresh_dir(&lay.classifiers(), force)?;
    let (x, xt) = (train.waves()?, test.waves()?);
    let ccfg = cfg.classifier_config();
    let mut acc = Vec::new();
    for (kind, k, y, yt) in [
        (
            LabelKind::Pitch,
            info.n_pitch_classes(),
            train.pitch_classes(&info),
            test.pitch_classes(&info),
        ),
        (
            LabelKind::Family,
            info.n_families,
            train.families(),
            test.families(),
        ),
    ] {
        let spec = TrunkSpec::desk(cfg.channel_mult, k, TrunkHead::Logits);
        let cls = train_classifier(&x, &y, (&xt, &yt), kind, &spec, &ccfg)?;
        save_classifier(&lay.classifier(kind), &cls, &cfg.config_hash())?;
        eprintln!(
            "train-classifiers: {kind:?} held-out accuracy {:.3}",
            cls.held_out_accuracy
        );
        acc.push(cls.held_out_accuracy);
    }
    Ok((acc[0], acc[1]))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GanRunOptions {
    /// Discard any earlier run of this preset.
    pub force: bool,
    /// Stop after this many generator steps instead of `g_steps`.
    pub until: Option<u64>,
    /// Resume even if the config changed since the checkpoint.
    pub allow_config_change: bool,
}

fn gan_specs(
    cfg: &PipelineConfig,
    info: &DatasetInfo,
    feature_dim: Option<usize>,
) -> (
    GeneratorSpec,
    DiscriminatorSpec,
    Option<AuxDiscriminatorSpec>,
) {
    (
        GeneratorSpec::desk(info.d_src, cfg.channel_mult, info.n_pitch_classes()),
        DiscriminatorSpec::desk(cfg.channel_mult, info.n_pitch_classes()),
        feature_dim.map(AuxDiscriminatorSpec::new),
    )
}

/// Serializes the full training state of one preset.
pub fn gan_checkpoint(st: &GanState, preset: Preset, config_hash: &str) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(json!({
        "kind": "gan",
        "preset": preset,
        "config_hash": config_hash,
        "g_updates": st.g_updates,
        "d_updates": st.d_updates,
        "g_spec": st.g_spec,
        "d_spec": st.d_spec,
        "aux_spec": st.aux_spec,
    }));
    ck.insert_net("g", &st.g)?;
    ck.insert_net("d1", &st.d1)?;
    if let Some(d2) = &st.d2 {
        ck.insert_net("d2", d2)?;
    }
    Ok(ck)
}

/// Rebuilds a training state from a checkpoint.
pub fn gan_state_from(ck: &Checkpoint) -> Result<GanState> {
    ensure!(ck.field::<String>("kind")? == "gan", "not a GAN checkpoint");
    let mut st = GanState::init(
        ck.field("g_spec")?,
        ck.field("d_spec")?,
        ck.field("aux_spec")?,
        0,
    )?;
    ck.restore_net("g", &mut st.g)?;
    ck.restore_net("d1", &mut st.d1)?;
    if let Some(d2) = st.d2.as_mut() {
        ck.restore_net("d2", d2)?;
    }
    st.g_updates = ck.field("g_updates")?;
    st.d_updates = ck.field("d_updates")?;
    Ok(st)
}

/// Generator-only view of a checkpoint, enough to translate.
pub fn load_generator(path: &Path) -> Result<(GanState, Preset, String)> {
    let ck = Checkpoint::load(path)?;
    let st = gan_state_from(&ck)?;
    Ok((st, ck.field("preset")?, ck.field("config_hash")?))
}

/// Drops log records past `step`, so a resumed run appends where the
/// checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: LogRecord = serde_json::from_str(line)
            .with_context(|| format!("bad line in {}", path.display()))?;
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad line in {}", path.display())))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GanRunSummary {
    pub resumed_from: Option<u64>,
    pub g_updates: u64,
    pub d_updates: u64,
    pub log: Vec<LogRecord>,
}

/// Trains one preset, resuming from its latest checkpoint when present.
pub fn train_gan(
    cfg: &PipelineConfig,
    preset: Preset,
    opts: GanRunOptions,
) -> Result<GanRunSummary> {
    let lay = layout(cfg);
    let info = DatasetInfo::load(&lay)?;
    let tcfg = cfg.train_config(preset);
    let hash = cfg.config_hash();
    let train = Corpus::load(&lay, Split::Train)?;
    let src = read_sources(&lay.sources(false))?;
    ensure!(
        src[0].values.len() == info.d_src,
        "source dimension disagrees with dataset.json"
    );
    let real = train.waves()?;
    let real_pitch = train.pitch_classes(&info);

    let mut metric = if tcfg.use_metric_loss || tcfg.use_aux_disc {
        Some(load_metric(&lay)?)
    } else {
        None
    };
    let real_phi = match (&mut metric, tcfg.use_aux_disc) {
        (Some((m, _)), true) => Some(m.features(&real)?),
        _ => None,
    };

    let dir = lay.gan(preset);
    let latest = lay.latest(preset);
    let mut resumed_from = None;
    let mut st = if latest.exists() && !opts.force {
        let ck = Checkpoint::load(&latest)?;
        let old: String = ck.field("config_hash")?;
        if old != hash && !opts.allow_config_change {
            bail!(
                "{} was written under a different config (hash {old}); use --force to restart or --allow-config-change to resume",
                latest.display()
            );
        }
        ensure!(
            ck.field::<Preset>("preset")? == preset,
            "{} belongs to another preset",
            latest.display()
        );
        let st = gan_state_from(&ck)?;
        truncate_log(&lay.train_log(preset), st.g_updates)?;
        resumed_from = Some(st.g_updates);
        eprintln!(
            "train-gan[{}]: resuming at step {}",
            preset.name(),
            st.g_updates
        );
        st
    } else {
        fresh_dir(&dir, true)?;
        let (g, d, aux) = gan_specs(
            cfg,
            &info,
            tcfg.use_aux_disc
                .then(|| metric.as_ref().map(|(m, _)| m.dim()))
                .flatten(),
        );
        GanState::init(g, d, aux, tcfg.seed)?
    };

    let until = opts.until.map_or(cfg.g_steps, |u| u.min(cfg.g_steps));
    let data = GanData {
        src: &src,
        real: &real,
        real_pitch: &real_pitch,
        real_phi: real_phi.as_ref(),
    };
    let terms = metric.as_mut().map(|(m, side)| MetricTerms {
        metric: m,
        stats_x: side.stats_x.clone(),
        stats_y: side.stats_y.clone(),
    });
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(lay.train_log(preset))?;
    let name = preset.name();
    let result = run_gan(
        &mut st,
        &data,
        terms,
        &tcfg,
        until,
        |rec| {
            let line = serde_json::to_string(rec).map_err(|e| to_core(e.into()))?;
            writeln!(log_file, "{line}").map_err(|e| to_core(e.into()))?;
            eprintln!(
                "train-gan[{name}]: step {} epoch {} d {:.4} g {:.4} metric {:.4} sn {:.4}",
                rec.step, rec.epoch, rec.d_loss, rec.g_loss, rec.metric_loss, rec.sn_max
            );
            Ok(())
        },
        |s| {
            if s.g_updates % cfg.checkpoint_every == 0 || s.g_updates == until {
                let ck = gan_checkpoint(s, preset, &hash).map_err(to_core)?;
                ck.save(&lay.step_checkpoint(preset, s.g_updates))
                    .map_err(to_core)?;
                ck.save(&latest).map_err(to_core)?;
            }
            Ok(())
        },
    );
    match result {
        Ok(log) => Ok(GanRunSummary {
            resumed_from,
            g_updates: st.g_updates,
            d_updates: st.d_updates,
            log,
        }),
        Err(e) => {
            let dump = gan_checkpoint(&st, preset, &hash)?;
            dump.save(&lay.diverged(preset))?;
            Err(anyhow::Error::new(e).context(format!(
                "training stopped at step {}; state saved to {}",
                st.g_updates,
                lay.diverged(preset).display()
            )))
        }
    }
}

fn to_core(e: anyhow::Error) -> xmodal::Error {
    xmodal::Error::InvalidArgument(format!("{e:#}"))
}

/// Where `translate` reads from and writes to.
#[derive(Clone, Debug, Default)]
pub struct TranslateOptions {
    /// Defaults to the preset's latest checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the held-out source vectors.
    pub sources: Option<PathBuf>,
    /// MIDI pitch for every clip; uniform over the range when absent.
    pub pitch: Option<u32>,
    /// Defaults to `translations/<preset>`.
    pub dest: Option<PathBuf>,
    pub force: bool,
}

/// Writes one WAV per source vector. Returns the written paths.
pub fn translate(
    cfg: &PipelineConfig,
    preset: Preset,
    opts: &TranslateOptions,
) -> Result<Vec<PathBuf>> {
    let lay = layout(cfg);
    let info = DatasetInfo::load(&lay)?;
    let ck_path = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| lay.latest(preset));
    let (st, _, _) =
        load_generator(&ck_path).context("no trained generator; run train-gan first")?;
    let src = read_sources(&opts.sources.clone().unwrap_or_else(|| lay.sources(true)))?;
    let pitch: Vec<usize> = match opts.pitch {
        Some(p) => {
            ensure!(
                (info.min_pitch..=info.max_pitch).contains(&p),
                "pitch {p} outside [{}, {}]",
                info.min_pitch,
                info.max_pitch
            );
            vec![(p - info.min_pitch) as usize; src.len()]
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ seeds::TRANSLATE);
            src.iter()
                .map(|_| rng.random_range(0..info.n_pitch_classes()))
                .collect()
        }
    };
    let waves = run_translate(&st.g, &st.g_spec, &src, &pitch)?;
    let dest = opts
        .dest
        .clone()
        .unwrap_or_else(|| lay.translations(preset));
    fresh_dir(&dest, opts.force)?;
    let mut out = Vec::with_capacity(waves.len());
    for ((s, p), w) in src.iter().zip(&pitch).zip(&waves) {
        let path = dest.join(format!(
            "src{:05}_pitch{}.wav",
            s.id,
            *p as u32 + info.min_pitch
        ));
        write_wav(&path, w)?;
        out.push(path);
    }
    eprintln!(
        "translate[{}]: wrote {} clips to {}",
        preset.name(),
        out.len(),
        dest.display()
    );
    Ok(out)
}

fn write_feature_csv(
    path: &Path,
    ids: &[usize],
    assigned: &[usize],
    rows: &[&[f32]],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = rows.first().map_or(0, |r| r.len());
    let mut header = vec!["id".to_string(), "assigned_family".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for ((id, a), r) in ids.iter().zip(assigned).zip(rows) {
        let mut rec = vec![id.to_string(), a.to_string()];
        rec.extend(r.iter().map(f32::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Translates the held-out sources and scores quality, preservation and
/// diversity against the real test clips.
pub fn evaluate(
    cfg: &PipelineConfig,
    preset: Preset,
    checkpoint: Option<&Path>,
) -> Result<EvalReport> {
    let lay = layout(cfg);
    let info = DatasetInfo::load(&lay)?;
    let ck_path = checkpoint.map_or_else(|| lay.latest(preset), Path::to_path_buf);
    let (st, _, hash) =
        load_generator(&ck_path).context("no trained generator; run train-gan first")?;
    let held = read_sources(&lay.sources(true))?;
    let test = Corpus::load(&lay, Split::Test)?;
    let real = test.waves()?;
    let real_family = test.families();
    let (mut metric, _) = load_metric(&lay)?;
    let pitch_cls = load_classifier(&lay, LabelKind::Pitch)?;
    let family_cls = load_classifier(&lay, LabelKind::Family)?;
    let out = run_eval(EvalInputs {
        g: &st.g,
        g_spec: &st.g_spec,
        src: &held,
        real: &real,
        real_family: &real_family,
        n_families: info.n_families,
        metric: &mut metric,
        pitch_classifier: &pitch_cls,
        family_classifier: &family_cls,
        assign_rule: cfg.assign_rule,
        seed: cfg.seed ^ seeds::EVAL,
        config_hash: hash,
    })?;

    let dir = lay.eval(preset);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &out.report)?;
    let ids: Vec<usize> = held.iter().map(|s| s.id).collect();
    write_feature_csv(
        &dir.join("translated_features.csv"),
        &ids,
        &out.assigned,
        &rows_of(&out.translated_phi),
    )?;
    let src_rows: Vec<&[f32]> = held.iter().map(|s| s.values.as_slice()).collect();
    write_feature_csv(
        &dir.join("source_features.csv"),
        &ids,
        &out.assigned,
        &src_rows,
    )?;
    eprintln!(
        "evaluate[{}]: {}",
        preset.name(),
        serde_json::to_string(&out.report)?
    );
    Ok(out.report)
}
