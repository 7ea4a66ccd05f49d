//! Network definitions: waveform generator, waveform discriminator with
//! pitch projection, feature-space auxiliary discriminator, and the
//! down-sampling trunk shared by the audio embedding and the classifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::graph::BnStats;
use crate::tensor::params::Bindings;
use crate::tensor::{spectral_normalize, Graph, NetParams, ParamTensor, Scalar, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;
/// Power iterations run once when a spectrally normalized weight is created.
pub const SN_WARMUP_ITERS: usize = 50;

/// Whether batch norm uses batch statistics or the stored running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-forward state: the graph being built and how parameters enter it.
pub struct Ctx<'g, T: Scalar> {
    pub g: &'g mut Graph<T>,
    pub bindings: Bindings,
    /// Parameters become differentiable leaves (otherwise constants).
    pub trainable: bool,
    pub mode: Mode,
    /// Advance spectral-norm vectors and batch-norm running statistics.
    pub update_state: bool,
    /// Power iterations per spectrally normalized weight when state advances.
    pub sn_iters: usize,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    /// Training forward of a network being optimized.
    pub fn train(g: &'g mut Graph<T>) -> Self {
        Self {
            g,
            bindings: Bindings::default(),
            trainable: true,
            mode: Mode::Train,
            update_state: true,
            sn_iters: 1,
        }
    }

    /// Train-mode statistics but frozen parameters and state.
    pub fn frozen_train(g: &'g mut Graph<T>) -> Self {
        Self {
            g,
            bindings: Bindings::default(),
            trainable: false,
            mode: Mode::Train,
            update_state: false,
            sn_iters: 0,
        }
    }

    pub fn infer(g: &'g mut Graph<T>) -> Self {
        Self {
            g,
            bindings: Bindings::default(),
            trainable: false,
            mode: Mode::Infer,
            update_state: false,
            sn_iters: 0,
        }
    }

    /// Differentiable inputs with frozen batch-norm statistics; used for
    /// gradient checks of whole networks.
    pub fn check(g: &'g mut Graph<T>) -> Self {
        Self {
            g,
            bindings: Bindings::default(),
            trainable: true,
            mode: Mode::Train,
            update_state: false,
            sn_iters: 0,
        }
    }

    fn param(&mut self, net: &NetParams<T>, name: &str) -> Result<Var> {
        net.bind(self.g, name, self.trainable, &mut self.bindings)
    }

    /// Binds a weight and divides it by its spectral-norm estimate.
    fn sn_param(&mut self, net: &mut NetParams<T>, name: &str) -> Result<Var> {
        let iters = if self.update_state { self.sn_iters } else { 0 };
        let est = spectral_normalize(net.get_mut(name)?, iters);
        let w = self.param(net, name)?;
        self.g.spectral_norm(w, &est)
    }

    fn weight(&mut self, net: &mut NetParams<T>, name: &str, sn: bool) -> Result<Var> {
        if sn {
            self.sn_param(net, name)
        } else {
            self.param(net, name)
        }
    }

    /// (Conditional) batch norm; `prefix.gamma`/`prefix.beta` are `[K, C]`
    /// tables, running statistics live in `prefix.mean`/`prefix.var`.
    fn batch_norm(&mut self, net: &mut NetParams<T>, prefix: &str, x: Var, ids: &[usize]) -> Result<Var> {
        let gamma = self.param(net, &format!("{prefix}.gamma"))?;
        let beta = self.param(net, &format!("{prefix}.beta"))?;
        let (mk, vk) = (format!("{prefix}.mean"), format!("{prefix}.var"));
        let stats = match self.mode {
            Mode::Train => BnStats::Batch,
            Mode::Infer => BnStats::Fixed {
                mean: net.buffer(&mk)?.data().to_vec(),
                var: net.buffer(&vk)?.data().to_vec(),
            },
        };
        let (y, batch) = self.g.batch_norm(x, gamma, beta, ids, stats, T::c(BN_EPS))?;
        if let (true, Some((m, v))) = (self.update_state, batch) {
            let mom = T::c(BN_MOMENTUM);
            for (key, fresh) in [(mk, m), (vk, v)] {
                let buf = net.buffers.get_mut(&key).expect("running stat exists");
                for (r, f) in buf.data_mut().iter_mut().zip(fresh) {
                    *r = (T::one() - mom) * *r + mom * f;
                }
            }
        }
        Ok(y)
    }
}

fn add_bn<T: Scalar>(net: &mut NetParams<T>, prefix: &str, classes: usize, channels: usize) {
    net.insert(&format!("{prefix}.gamma"), ParamTensor::new(Tensor::full(&[classes, channels], T::one())));
    net.insert(&format!("{prefix}.beta"), ParamTensor::new(Tensor::zeros(&[classes, channels])));
    net.buffers.insert(format!("{prefix}.mean"), Tensor::zeros(&[channels]));
    net.buffers.insert(format!("{prefix}.var"), Tensor::full(&[channels], T::one()));
}

fn weight<T: Scalar>(shape: &[usize], sn: bool, rng: &mut ChaCha8Rng) -> ParamTensor<T> {
    let p = ParamTensor::normal(shape, INIT_STD, rng);
    if sn {
        p.with_spectral_norm(rng, SN_WARMUP_ITERS)
    } else {
        p
    }
}

fn wave_batch<T: Scalar>(g: &Graph<T>, x: Var, length: usize) -> Result<()> {
    match g.value(x).shape() {
        [_, l, 1] if *l == length => Ok(()),
        s => Err(crate::error::shape_err("network input", format!("expected [B, {length}, 1], got {s:?}"))),
    }
}

/// Generator: dense head, reshape, conditional batch norm, then strided
/// transposed-conv blocks up to the waveform; every batch norm is
/// conditioned on the pitch class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub d_src: usize,
    pub channel_mult: usize,
    pub n_pitch_classes: usize,
    pub length: usize,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub spectral_norm: bool,
}

impl GeneratorSpec {
    pub fn desk(d_src: usize, channel_mult: usize, n_pitch_classes: usize) -> Self {
        Self {
            d_src,
            channel_mult,
            n_pitch_classes,
            length: 8192,
            strides: vec![4, 4, 4, 4, 2],
            kernel: 25,
            spectral_norm: true,
        }
    }

    pub fn head_len(&self) -> usize {
        self.length / self.strides.iter().product::<usize>()
    }

    pub fn head_channels(&self) -> usize {
        32 * self.channel_mult
    }

    /// Output channels of each up-sampling block.
    pub fn block_widths(&self) -> Vec<usize> {
        let n = self.strides.len();
        (0..n)
            .map(|i| if i + 1 == n { 1 } else { self.head_channels() >> (i + 1) })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let prod: usize = self.strides.iter().product();
        let ok = self.d_src > 0
            && self.channel_mult > 0
            && self.n_pitch_classes > 0
            && self.kernel > 0
            && !self.strides.is_empty()
            && prod > 0
            && 16 * prod == self.length
            && self.block_widths().iter().all(|&w| w > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent generator spec {self:?}")))
        }
    }
}

pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, seed: u64) -> Result<NetParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NetParams::new();
    let k = spec.n_pitch_classes;
    let head = spec.head_len() * spec.head_channels();
    net.insert("dense.w", weight(&[spec.d_src, head], spec.spectral_norm, &mut rng));
    net.insert("dense.b", ParamTensor::new(Tensor::zeros(&[head])));
    add_bn(&mut net, "bn0", k, spec.head_channels());
    let mut cin = spec.head_channels();
    for (i, &cout) in spec.block_widths().iter().enumerate() {
        net.insert(&format!("up{i}.k"), weight(&[spec.kernel, cout, cin], spec.spectral_norm, &mut rng));
        add_bn(&mut net, &format!("up{i}"), k, cout);
        cin = cout;
    }
    Ok(net)
}

/// `z: [B, d_src]`, one pitch class per sample; returns `[B, L, 1]`.
pub fn generator_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    net: &mut NetParams<T>,
    spec: &GeneratorSpec,
    z: Var,
    pitch: &[usize],
) -> Result<Var> {
    let b = ctx.g.value(z).shape()[0];
    let w = ctx.weight(net, "dense.w", spec.spectral_norm)?;
    let bias = ctx.param(net, "dense.b")?;
    let h = ctx.g.dense(z, w, Some(bias))?;
    let mut h = ctx.g.reshape(h, &[b, spec.head_len(), spec.head_channels()])?;
    h = ctx.batch_norm(net, "bn0", h, pitch)?;
    h = ctx.g.leaky_relu(h, T::c(LEAKY_SLOPE));
    let last = spec.strides.len() - 1;
    for (i, &s) in spec.strides.iter().enumerate() {
        let k = ctx.weight(net, &format!("up{i}.k"), spec.spectral_norm)?;
        h = ctx.g.conv_transpose1d(h, k, s)?;
        h = ctx.batch_norm(net, &format!("up{i}"), h, pitch)?;
        h = if i == last {
            ctx.g.tanh(h)
        } else {
            ctx.g.leaky_relu(h, T::c(LEAKY_SLOPE))
        };
    }
    Ok(h)
}

/// Waveform discriminator: strided conv blocks with batch norm, leaky ReLU
/// and phase shuffle, sum over time, scalar head plus pitch projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub channel_mult: usize,
    pub n_pitch_classes: usize,
    pub length: usize,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub phase_shuffle: usize,
}

impl DiscriminatorSpec {
    pub fn desk(channel_mult: usize, n_pitch_classes: usize) -> Self {
        Self {
            channel_mult,
            n_pitch_classes,
            length: 8192,
            strides: vec![4, 4, 4, 4, 2],
            kernel: 25,
            phase_shuffle: 2,
        }
    }

    pub fn block_widths(&self) -> Vec<usize> {
        (0..self.strides.len()).map(|i| self.channel_mult << i).collect()
    }

    pub fn feature_width(&self) -> usize {
        *self.block_widths().last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.channel_mult > 0
            && self.n_pitch_classes > 0
            && self.kernel > 0
            && !self.strides.is_empty()
            && self.strides.iter().all(|&s| s > 0)
            && self.length % self.strides.iter().product::<usize>() == 0
            && self.length / self.strides.iter().product::<usize>() > self.phase_shuffle;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent discriminator spec {self:?}")))
        }
    }
}

pub fn build_discriminator<T: Scalar>(spec: &DiscriminatorSpec, seed: u64) -> Result<NetParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NetParams::new();
    let mut cin = 1;
    for (i, &cout) in spec.block_widths().iter().enumerate() {
        net.insert(&format!("down{i}.k"), weight(&[spec.kernel, cin, cout], true, &mut rng));
        add_bn(&mut net, &format!("down{i}"), 1, cout);
        cin = cout;
    }
    let f = spec.feature_width();
    net.insert("head.w", weight(&[f, 1], true, &mut rng));
    net.insert("head.b", ParamTensor::new(Tensor::zeros(&[1])));
    net.insert("embed", ParamTensor::normal(&[spec.n_pitch_classes, f], INIT_STD, &mut rng));
    Ok(net)
}

/// Scores for `x: [B, L, 1]` with pitch classes; returns `[B, 1]`.
/// `rng` draws the phase-shuffle offsets.
pub fn discriminator_forward<T: Scalar, R: Rng>(
    ctx: &mut Ctx<'_, T>,
    net: &mut NetParams<T>,
    spec: &DiscriminatorSpec,
    x: Var,
    pitch: &[usize],
    rng: &mut R,
) -> Result<Var> {
    wave_batch(ctx.g, x, spec.length)?;
    let b = ctx.g.value(x).shape()[0];
    let zeros = vec![0usize; b];
    let n = spec.phase_shuffle as i64;
    let mut h = x;
    for (i, &s) in spec.strides.iter().enumerate() {
        let k = ctx.sn_param(net, &format!("down{i}.k"))?;
        h = ctx.g.conv1d(h, k, s)?;
        h = ctx.batch_norm(net, &format!("down{i}"), h, &zeros)?;
        h = ctx.g.leaky_relu(h, T::c(LEAKY_SLOPE));
        if n > 0 {
            let shifts: Vec<isize> = (0..b).map(|_| rng.random_range(-n..=n) as isize).collect();
            h = ctx.g.phase_shuffle(h, &shifts)?;
        }
    }
    let feat = ctx.g.sum_time(h)?;
    let w = ctx.sn_param(net, "head.w")?;
    let bias = ctx.param(net, "head.b")?;
    let out = ctx.g.dense(feat, w, Some(bias))?;
    let table = ctx.param(net, "embed")?;
    let emb = ctx.g.gather(table, pitch)?;
    let proj = ctx.g.row_dot(feat, emb)?;
    ctx.g.add(out, proj)
}

/// Feature-space discriminator: a stack of spectrally normalized dense
/// layers with leaky ReLU in between, ending in one unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxDiscriminatorSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl AuxDiscriminatorSpec {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 64, 32, 16],
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(1);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!("inconsistent aux discriminator spec {self:?}")));
        }
        Ok(())
    }
}

pub fn build_aux_discriminator<T: Scalar>(spec: &AuxDiscriminatorSpec, seed: u64) -> Result<NetParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NetParams::new();
    for (i, pair) in spec.widths().windows(2).enumerate() {
        net.insert(&format!("fc{i}.w"), weight(&[pair[0], pair[1]], true, &mut rng));
        net.insert(&format!("fc{i}.b"), ParamTensor::new(Tensor::zeros(&[pair[1]])));
    }
    Ok(net)
}

/// `feat: [B, input_dim]` to `[B, 1]`.
pub fn aux_discriminator_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    net: &mut NetParams<T>,
    spec: &AuxDiscriminatorSpec,
    feat: Var,
) -> Result<Var> {
    let layers = spec.widths().len() - 1;
    let mut h = feat;
    for i in 0..layers {
        let w = ctx.sn_param(net, &format!("fc{i}.w"))?;
        let b = ctx.param(net, &format!("fc{i}.b"))?;
        h = ctx.g.dense(h, w, Some(b))?;
        if i + 1 < layers {
            h = ctx.g.leaky_relu(h, T::c(LEAKY_SLOPE));
        }
    }
    Ok(h)
}

/// What sits on top of the down-sampling trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkHead {
    /// Dense projection followed by L2 normalization (audio embedding).
    Normalized,
    /// Dense logits for a softmax classifier.
    Logits,
}

/// Conv trunk without phase shuffle or spectral norm, mean over time, then
/// a dense head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkSpec {
    pub channel_mult: usize,
    pub length: usize,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub out_dim: usize,
    pub head: TrunkHead,
}

impl TrunkSpec {
    pub fn desk(channel_mult: usize, out_dim: usize, head: TrunkHead) -> Self {
        Self {
            channel_mult,
            length: 8192,
            strides: vec![4, 4, 4, 4, 2],
            kernel: 25,
            out_dim,
            head,
        }
    }

    pub fn block_widths(&self) -> Vec<usize> {
        (0..self.strides.len()).map(|i| self.channel_mult << i).collect()
    }

    pub fn feature_width(&self) -> usize {
        *self.block_widths().last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.channel_mult > 0
            && self.out_dim > 0
            && self.kernel > 0
            && !self.strides.is_empty()
            && self.strides.iter().all(|&s| s > 0)
            && self.length % self.strides.iter().product::<usize>() == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent trunk spec {self:?}")))
        }
    }
}

pub fn build_trunk<T: Scalar>(spec: &TrunkSpec, seed: u64) -> Result<NetParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NetParams::new();
    let mut cin = 1;
    for (i, &cout) in spec.block_widths().iter().enumerate() {
        net.insert(&format!("down{i}.k"), weight(&[spec.kernel, cin, cout], false, &mut rng));
        add_bn(&mut net, &format!("down{i}"), 1, cout);
        cin = cout;
    }
    net.insert("head.w", weight(&[spec.feature_width(), spec.out_dim], false, &mut rng));
    net.insert("head.b", ParamTensor::new(Tensor::zeros(&[spec.out_dim])));
    Ok(net)
}

/// Returns `(penultimate features [B, 16c], head output [B, out_dim])`.
pub fn trunk_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    net: &mut NetParams<T>,
    spec: &TrunkSpec,
    x: Var,
) -> Result<(Var, Var)> {
    wave_batch(ctx.g, x, spec.length)?;
    let b = ctx.g.value(x).shape()[0];
    let zeros = vec![0usize; b];
    let mut h = x;
    for (i, &s) in spec.strides.iter().enumerate() {
        let k = ctx.param(net, &format!("down{i}.k"))?;
        h = ctx.g.conv1d(h, k, s)?;
        h = ctx.batch_norm(net, &format!("down{i}"), h, &zeros)?;
        h = ctx.g.leaky_relu(h, T::c(LEAKY_SLOPE));
    }
    let feat = ctx.g.mean_time(h)?;
    let w = ctx.param(net, "head.w")?;
    let bias = ctx.param(net, "head.b")?;
    let out = ctx.g.dense(feat, w, Some(bias))?;
    let out = match spec.head {
        TrunkHead::Normalized => ctx.g.l2_normalize(out)?,
        TrunkHead::Logits => out,
    };
    Ok((feat, out))
}
