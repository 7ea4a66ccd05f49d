//! Adversarial training of the waveform generator: hinge losses, the
//! pairwise-distance preservation loss, the 5:1 alternating schedule and
//! inference-mode translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{nth_batch, SourceVec, Waveform};
use crate::error::{shape_err, Error, Result};
use crate::metric::{pairwise_distances, AudioMetric, MetricStats};
use crate::nets::{
    aux_discriminator_forward, build_aux_discriminator, build_discriminator, build_generator, discriminator_forward,
    generator_forward, AuxDiscriminatorSpec, Ctx, DiscriminatorSpec, GeneratorSpec,
};
use crate::tensor::graph::CustomOp;
use crate::tensor::spectral::{power_iteration, top_singular_value};
use crate::tensor::{adam_step, Graph, NetParams, OptimizerConfig, Scalar, Tensor, Var};

/// Power iterations behind the spectral-norm audit.
pub const AUDIT_ITERS: usize = 200;
/// Largest top singular value an effective discriminator weight may have.
pub const AUDIT_BOUND: f64 = 1.0 + 1e-2;
const TRANSLATE_CHUNK: usize = 64;

/// `-mean(min(0, -1 + real)) - mean(min(0, -1 - fake))`.
pub fn loss_d_hinge<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let r = g.hinge(real, -T::one());
    let f = g.hinge(fake, T::one());
    g.add(r, f)
}

/// `-mean(fake)`.
pub fn loss_g_adv<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, -T::one())
}

/// Mean absolute difference of standardized pairwise distances between a
/// source batch (given as its `i < j` distances) and `feat: [N, D]`.
pub fn metric_loss<T: Scalar>(
    g: &mut Graph<T>,
    src_dists: &[f64],
    feat: Var,
    stats_x: &MetricStats,
    stats_y: &MetricStats,
) -> Result<Var> {
    let f = g.value(feat);
    let [n, d] = f.shape()[..] else {
        return Err(shape_err("metric loss", format!("expected [N, D], got {:?}", f.shape())));
    };
    if n < 2 || src_dists.len() != n * (n - 1) / 2 {
        return Err(shape_err("metric loss", format!("{} source pairs for {n} features", src_dists.len())));
    }
    if !(stats_x.sigma > 0.0 && stats_y.sigma > 0.0) {
        return Err(Error::Degenerate("metric stats need positive sigma".into()));
    }
    let mut pairs = Vec::with_capacity(src_dists.len());
    let mut total = 0.0;
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let df = f.row(i).iter().zip(f.row(j)).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>().sqrt();
            let diff = (src_dists[k] - stats_x.mu) / stats_x.sigma - (df - stats_y.mu) / stats_y.sigma;
            total += diff.abs();
            pairs.push((i, j, diff.signum() * f64::from(diff != 0.0), df));
            k += 1;
        }
    }
    let z = pairs.len() as f64;
    let op = MetricOp {
        pairs,
        scale: 1.0 / (z * stats_y.sigma),
        dim: d,
    };
    Ok(g.custom(&[feat], Tensor::scalar(T::c(total / z)), Box::new(op)))
}

struct MetricOp {
    /// `(i, j, sign of the standardized difference, feature distance)`.
    pairs: Vec<(usize, usize, f64, f64)>,
    scale: f64,
    dim: usize,
}

impl<T: Scalar> CustomOp<T> for MetricOp {
    fn name(&self) -> &'static str {
        "metric_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dout: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let f = inputs[0];
        let mut df = Tensor::zeros(f.shape());
        let up = dout.item().as_f64();
        let d = self.dim;
        let grad = df.data_mut();
        for &(i, j, sign, dist) in &self.pairs {
            if sign == 0.0 || dist == 0.0 {
                continue;
            }
            // the feature distance enters with a negative sign
            let c = T::c(-sign * self.scale * up / dist);
            for k in 0..d {
                let delta = f.data()[i * d + k] - f.data()[j * d + k];
                grad[i * d + k] += c * delta;
                grad[j * d + k] -= c * delta;
            }
        }
        vec![Some(df)]
    }
}

/// `-mean(d1_fake) - [aux] mean(d2_fake) + lambda · metric`.
pub fn loss_g_total<T: Scalar>(
    g: &mut Graph<T>,
    d1_fake: Var,
    d2_fake: Option<Var>,
    metric: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    let mut total = loss_g_adv(g, d1_fake);
    if let Some(d2) = d2_fake {
        let a = loss_g_adv(g, d2);
        total = g.add(total, a)?;
    }
    if let Some(m) = metric {
        let m = g.scale(m, T::c(lambda));
        total = g.add(total, m)?;
    }
    Ok(total)
}

/// Hinge loss of the waveform critic plus, when given, that of the feature
/// critic on `(real, fake)` scores.
pub fn loss_d_total<T: Scalar>(g: &mut Graph<T>, d1_real: Var, d1_fake: Var, d2: Option<(Var, Var)>) -> Result<Var> {
    let mut total = loss_d_hinge(g, d1_real, d1_fake)?;
    if let Some((r, f)) = d2 {
        let l = loss_d_hinge(g, r, f)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// Which losses are active; the three rows of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "geo")]
    Geo,
    #[serde(rename = "geo+aux")]
    GeoAux,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Baseline, Preset::Geo, Preset::GeoAux];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Geo => "geo",
            Self::GeoAux => "geo+aux",
        }
    }

    /// `(use_metric_loss, use_aux_disc)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Self::Baseline => (false, false),
            Self::Geo => (true, false),
            Self::GeoAux => (true, true),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset {s:?} (baseline, geo, geo+aux)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_metric: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Generator updates to run.
    pub g_steps: u64,
    pub use_metric_loss: bool,
    pub use_aux_disc: bool,
    /// Generator steps between log records.
    pub log_every: u64,
    /// Power iterations per spectrally normalized weight in every training
    /// forward.
    pub sn_power_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_metric: 10.0,
            n_critic: 5,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            g_steps: 2000,
            use_metric_loss: true,
            use_aux_disc: false,
            log_every: 10,
            sn_power_iters: 1,
        }
    }
}

impl TrainConfig {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        let (metric, aux) = preset.flags();
        self.use_metric_loss = metric;
        self.use_aux_disc = aux;
        if !metric {
            self.lambda_metric = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.n_critic == 0
            || !(self.lambda_metric >= 0.0)
            || self.batch_size < 2
            || self.log_every == 0
            || self.sn_power_iters == 0
        {
            return Err(Error::InvalidArgument(format!("bad train config {self:?}")));
        }
        Ok(())
    }
}

/// Generator, waveform critic and (optional) feature critic with counters.
#[derive(Clone, Debug, PartialEq)]
pub struct GanState {
    pub g_spec: GeneratorSpec,
    pub d_spec: DiscriminatorSpec,
    pub aux_spec: Option<AuxDiscriminatorSpec>,
    pub g: NetParams<f32>,
    pub d1: NetParams<f32>,
    pub d2: Option<NetParams<f32>>,
    pub g_updates: u64,
    pub d_updates: u64,
}

impl GanState {
    pub fn init(
        g_spec: GeneratorSpec,
        d_spec: DiscriminatorSpec,
        aux_spec: Option<AuxDiscriminatorSpec>,
        seed: u64,
    ) -> Result<Self> {
        let g = build_generator(&g_spec, seed ^ 0x6e6e_0001)?;
        let d1 = build_discriminator(&d_spec, seed ^ 0x6e6e_0002)?;
        let d2 = aux_spec.as_ref().map(|s| build_aux_discriminator(s, seed ^ 0x6e6e_0003)).transpose()?;
        Ok(Self {
            g_spec,
            d_spec,
            aux_spec,
            g,
            d1,
            d2,
            g_updates: 0,
            d_updates: 0,
        })
    }
}

/// Training inputs: source embeddings, real clips with pitch classes, and
/// (when a metric is used) the real clips' metric features.
pub struct GanData<'a> {
    pub src: &'a [SourceVec],
    /// `[n, L, 1]`.
    pub real: &'a Tensor<f32>,
    /// Pitch class of each real clip, in `0..n_pitch_classes`.
    pub real_pitch: &'a [usize],
    /// `[n, D]` metric features of `real`.
    pub real_phi: Option<&'a Tensor<f32>>,
}

/// What the preservation loss and the feature critic need.
pub struct MetricTerms<'a> {
    pub metric: &'a mut AudioMetric<f32>,
    pub stats_x: MetricStats,
    pub stats_y: MetricStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub metric_loss: f64,
    /// Largest top singular value over effective critic weights.
    pub sn_max: f64,
}

/// Deterministic stream for `(seed, step, purpose)`, so runs can resume
/// from any step without saved RNG state.
fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step * 64 + purpose);
    rng
}

fn gather_rows(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(shape, data)
}

fn source_batch(src: &[SourceVec], idx: &[usize]) -> Result<Tensor<f32>> {
    let d = src[0].values.len();
    let data = idx.iter().flat_map(|&i| src[i].values.iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data)
}

/// Largest top singular value of the effective weights of every spectrally
/// normalized parameter, each divided by the estimate a forward pass would
/// use (`iters` power iterations from the stored vector, which is left
/// untouched).
pub fn sn_audit(net: &NetParams<f32>, iters: usize) -> f64 {
    net.params
        .values()
        .filter_map(|p| {
            let u = p.sn_u.as_ref()?;
            let (w, shape) = (p.value.data(), p.value.shape());
            let est = power_iteration(w, shape, u, iters);
            Some(top_singular_value(w, shape, AUDIT_ITERS) / est.sigma.as_f64())
        })
        .fold(0.0, f64::max)
}

fn check_finite(what: &str, step: u64, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at generator step {step}")))
    }
}

struct Trainer<'a, 'm> {
    cfg: &'a TrainConfig,
    data: &'a GanData<'a>,
    terms: Option<MetricTerms<'m>>,
    per_epoch: u64,
}

impl Trainer<'_, '_> {
    fn epoch_of(&self, d_batch: u64) -> u64 {
        d_batch / self.per_epoch
    }

    fn fake_pitches(&self, rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| rng.random_range(0..k)).collect()
    }

    /// One critic update on the `c`-th real batch; returns the loss.
    fn d_step(&mut self, st: &mut GanState, step: u64, j: u64) -> Result<f64> {
        let cfg = self.cfg;
        let c = step * cfg.n_critic as u64 + j;
        let mut rng = step_rng(cfg.seed, step, 1 + j);
        let (_, real_idx) = nth_batch(self.data.real.rows(), cfg.batch_size, cfg.seed, c)?;
        let (_, src_idx) = nth_batch(self.data.src.len(), cfg.batch_size, cfg.seed ^ 0x5eed, c)?;
        let fake_pitch = self.fake_pitches(&mut rng, st.g_spec.n_pitch_classes);
        let real_pitch: Vec<usize> = real_idx.iter().map(|&i| self.data.real_pitch[i]).collect();

        let fake = {
            let mut g = Graph::new();
            let z = g.constant(source_batch(self.data.src, &src_idx)?);
            let mut ctx = Ctx::frozen_train(&mut g);
            let y = generator_forward(&mut ctx, &mut st.g, &st.g_spec, z, &fake_pitch)?;
            g.value(y).clone()
        };
        let fake_phi = match (&mut self.terms, cfg.use_aux_disc && st.d2.is_some()) {
            (Some(t), true) => Some(t.metric.features(&fake)?),
            _ => None,
        };

        let mut g = Graph::new();
        let xr = g.constant(gather_rows(self.data.real, &real_idx)?);
        let xf = g.constant(fake);
        let mut ctx = Ctx::train(&mut g);
        ctx.sn_iters = cfg.sn_power_iters;
        let sr = discriminator_forward(&mut ctx, &mut st.d1, &st.d_spec, xr, &real_pitch, &mut rng)?;
        let sf = discriminator_forward(&mut ctx, &mut st.d1, &st.d_spec, xf, &fake_pitch, &mut rng)?;
        let b1 = std::mem::take(&mut ctx.bindings);
        let mut b2 = None;
        let mut d2_scores = None;
        if let (Some(d2), Some(spec), Some(fphi)) = (st.d2.as_mut(), st.aux_spec.as_ref(), fake_phi) {
            let rphi = self.data.real_phi.ok_or_else(|| Error::InvalidArgument("feature critic needs real features".into()))?;
            let pr = g.constant(gather_rows(rphi, &real_idx)?);
            let pf = g.constant(fphi);
            let mut ctx = Ctx::train(&mut g);
            ctx.sn_iters = cfg.sn_power_iters;
            let s2r = aux_discriminator_forward(&mut ctx, d2, spec, pr)?;
            let s2f = aux_discriminator_forward(&mut ctx, d2, spec, pf)?;
            b2 = Some(std::mem::take(&mut ctx.bindings));
            d2_scores = Some((s2r, s2f));
        }
        let loss = loss_d_total(&mut g, sr, sf, d2_scores)?;
        let value = f64::from(g.value(loss).item());
        check_finite("discriminator loss", step, value)?;
        let grads = g.backward(loss)?;
        let epoch = self.epoch_of(c);
        st.d1.accumulate(&grads, &b1)?;
        adam_step(&mut st.d1, &cfg.optimizer, epoch);
        if let (Some(d2), Some(b2)) = (st.d2.as_mut(), b2) {
            d2.accumulate(&grads, &b2)?;
            adam_step(d2, &cfg.optimizer, epoch);
        }
        st.d_updates += 1;
        Ok(value)
    }

    /// One generator update; returns `(total loss, metric loss)`.
    fn g_step(&mut self, st: &mut GanState, step: u64) -> Result<(f64, f64)> {
        let cfg = self.cfg;
        let mut rng = step_rng(cfg.seed, step, 0);
        let (_, src_idx) = nth_batch(self.data.src.len(), cfg.batch_size, cfg.seed ^ 0x6e11, step)?;
        let pitch = self.fake_pitches(&mut rng, st.g_spec.n_pitch_classes);

        let mut g = Graph::new();
        let z = g.constant(source_batch(self.data.src, &src_idx)?);
        let mut ctx = Ctx::train(&mut g);
        ctx.sn_iters = cfg.sn_power_iters;
        let fake = generator_forward(&mut ctx, &mut st.g, &st.g_spec, z, &pitch)?;
        let bg = std::mem::take(&mut ctx.bindings);
        let mut ctx = Ctx::frozen_train(&mut g);
        let s1 = discriminator_forward(&mut ctx, &mut st.d1, &st.d_spec, fake, &pitch, &mut rng)?;

        let mut s2 = None;
        let mut ml = None;
        if let Some(t) = self.terms.as_mut().filter(|_| cfg.use_metric_loss || cfg.use_aux_disc) {
            let phi = t.metric.apply(&mut g, fake)?;
            if let (true, Some(d2), Some(spec)) = (cfg.use_aux_disc, st.d2.as_mut(), st.aux_spec.as_ref()) {
                let mut ctx = Ctx::frozen_train(&mut g);
                s2 = Some(aux_discriminator_forward(&mut ctx, d2, spec, phi)?);
            }
            if cfg.use_metric_loss {
                let src: Vec<&[f32]> = src_idx.iter().map(|&i| self.data.src[i].values.as_slice()).collect();
                ml = Some(metric_loss(&mut g, &pairwise_distances(&src), phi, &t.stats_x, &t.stats_y)?);
            }
        }
        let loss = loss_g_total(&mut g, s1, s2, ml, cfg.lambda_metric)?;
        let value = f64::from(g.value(loss).item());
        let metric_value = ml.map_or(0.0, |m| f64::from(g.value(m).item()));
        check_finite("generator loss", step, value)?;
        let grads = g.backward(loss)?;
        st.g.accumulate(&grads, &bg)?;
        let epoch = self.epoch_of((step + 1) * cfg.n_critic as u64 - 1);
        adam_step(&mut st.g, &cfg.optimizer, epoch);
        st.g_updates += 1;
        Ok((value, metric_value))
    }
}

/// Runs generator steps `st.g_updates .. until` (each preceded by
/// `n_critic` critic steps). Every `log_every` steps a record is passed to
/// `on_log`; `on_step` sees the state after each generator step.
pub fn train_gan(
    st: &mut GanState,
    data: &GanData<'_>,
    terms: Option<MetricTerms<'_>>,
    cfg: &TrainConfig,
    until: u64,
    mut on_log: impl FnMut(&LogRecord) -> Result<()>,
    mut on_step: impl FnMut(&GanState) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    let n_real = data.real.rows();
    if data.real_pitch.len() != n_real || data.src.is_empty() {
        return Err(Error::InvalidArgument("inconsistent training data".into()));
    }
    if data.real_pitch.iter().any(|&p| p >= st.g_spec.n_pitch_classes) {
        return Err(Error::InvalidArgument("real pitch class out of range".into()));
    }
    if cfg.batch_size > n_real || cfg.batch_size > data.src.len() {
        return Err(Error::InvalidArgument(format!("batch size {} exceeds the data", cfg.batch_size)));
    }
    if (cfg.use_metric_loss || cfg.use_aux_disc) && terms.is_none() {
        return Err(Error::InvalidArgument("metric terms required by this configuration".into()));
    }
    if cfg.use_aux_disc && (st.d2.is_none() || data.real_phi.is_none()) {
        return Err(Error::InvalidArgument("feature critic and real features required".into()));
    }
    if st.d_updates != st.g_updates * cfg.n_critic as u64 {
        return Err(Error::InvalidArgument("update counters out of step".into()));
    }
    let mut tr = Trainer {
        cfg,
        data,
        terms,
        per_epoch: (n_real / cfg.batch_size) as u64,
    };
    let mut log = Vec::new();
    while st.g_updates < until {
        let step = st.g_updates;
        let mut d_loss = 0.0;
        for j in 0..cfg.n_critic as u64 {
            d_loss = tr.d_step(st, step, j)?;
        }
        let (g_loss, metric_loss) = tr.g_step(st, step)?;
        if !(st.g.all_finite() && st.d1.all_finite() && st.d2.as_ref().is_none_or(NetParams::all_finite)) {
            return Err(Error::NonFinite(format!("parameters after generator step {step}")));
        }
        if st.g_updates % cfg.log_every == 0 {
            let epoch = tr.epoch_of(st.d_updates - 1);
            let audit = |n: &NetParams<f32>| sn_audit(n, cfg.sn_power_iters);
            let sn_max = st.d2.iter().map(audit).fold(audit(&st.d1), f64::max);
            let rec = LogRecord {
                step: st.g_updates,
                epoch,
                lr: cfg.optimizer.lr(epoch),
                d_loss,
                g_loss,
                metric_loss,
                sn_max,
            };
            on_log(&rec)?;
            log.push(rec);
        }
        on_step(st)?;
    }
    Ok(log)
}

/// Generator forward in inference mode (running batch-norm statistics).
pub fn translate(g_net: &NetParams<f32>, spec: &GeneratorSpec, z: &[SourceVec], pitch: &[usize]) -> Result<Vec<Waveform>> {
    if z.len() != pitch.len() {
        return Err(shape_err("translate", "one pitch per source vector"));
    }
    if let Some(&p) = pitch.iter().find(|&&p| p >= spec.n_pitch_classes) {
        return Err(Error::InvalidArgument(format!("pitch class {p} >= {}", spec.n_pitch_classes)));
    }
    if let Some(v) = z.iter().find(|v| v.values.len() != spec.d_src) {
        return Err(shape_err("translate", format!("source {} has dim {}", v.id, v.values.len())));
    }
    let mut net = g_net.clone();
    let mut out = Vec::with_capacity(z.len());
    for start in (0..z.len()).step_by(TRANSLATE_CHUNK) {
        let end = (start + TRANSLATE_CHUNK).min(z.len());
        let idx: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        let zv = g.constant(source_batch(z, &idx)?);
        let mut ctx = Ctx::infer(&mut g);
        let y = generator_forward(&mut ctx, &mut net, spec, zv, &pitch[start..end])?;
        for i in 0..idx.len() {
            out.push(Waveform::new(g.value(y).row(i).iter().map(|v| v.clamp(-1.0, 1.0)).collect())?);
        }
    }
    Ok(out)
}
