//! The audio metric: scaled concatenation of a triplet-trained waveform
//! embedding and flattened MFCCs, plus the pairwise-distance statistics
//! used to standardize it.

pub mod mfcc;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use mfcc::{Mfcc, MfccConfig};

use crate::data::{batch_iterator, LabeledClip};
use crate::error::{shape_err, Error, Result};
use crate::nets::{build_trunk, trunk_forward, Ctx, TrunkHead, TrunkSpec};
use crate::tensor::graph::CustomOp;
use crate::tensor::{adam_step, Graph, NetParams, OptimizerConfig, Scalar, Tensor, Var};

/// Clips per forward pass when embedding a whole set.
const EVAL_CHUNK: usize = 64;

pub fn l2<A: AsRef<[f32]> + ?Sized, B: AsRef<[f32]> + ?Sized>(a: &A, b: &B) -> f64 {
    a.as_ref()
        .iter()
        .zip(b.as_ref())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Distances of all unordered pairs `(i, j)`, `i < j`, in row-major order.
pub fn pairwise_distances<R: AsRef<[f32]>>(rows: &[R]) -> Vec<f64> {
    let n = rows.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(l2(&rows[i], &rows[j]));
        }
    }
    out
}

pub fn max_pairwise_distance<R: AsRef<[f32]>>(rows: &[R]) -> f64 {
    pairwise_distances(rows).into_iter().fold(0.0, f64::max)
}

/// Rows of a 2-D tensor.
pub fn rows_of<T: Scalar>(t: &Tensor<T>) -> Vec<&[T]> {
    (0..t.rows()).map(|i| t.row(i)).collect()
}

/// Mean and population standard deviation of pairwise distances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mu: f64,
    pub sigma: f64,
    pub n_pairs: usize,
}

pub fn pairwise_stats<R: AsRef<[f32]>>(rows: &[R]) -> Result<MetricStats> {
    if rows.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 samples, got {}", rows.len())));
    }
    let d = pairwise_distances(rows);
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let sigma = (d.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("pairwise distances have zero spread".into()));
    }
    Ok(MetricStats {
        mu,
        sigma,
        n_pairs: d.len(),
    })
}

/// `max(0, |a-p|^2 - |a-n|^2 + margin)`.
pub fn triplet_loss(a: &[f32], p: &[f32], n: &[f32], margin: f64) -> f64 {
    (l2(a, p).powi(2) - l2(a, n).powi(2) + margin).max(0.0)
}

/// Batch-all triplet loss over `emb: [B, d]`: every (anchor, positive,
/// negative) with matching anchor/positive labels and a different negative
/// label; the mean is taken over triplets with positive loss (zero if none).
pub fn batch_all_triplet<T: Scalar>(g: &mut Graph<T>, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let e = g.value(emb);
    let [b, _] = e.shape()[..] else {
        return Err(shape_err("triplet", format!("expected [B, d], got {:?}", e.shape())));
    };
    if labels.len() != b {
        return Err(shape_err("triplet", "one label per row"));
    }
    let sq = |i: usize, j: usize| -> T {
        e.row(i).iter().zip(e.row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum()
    };
    let mut d2 = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i + 1..b {
            let v = sq(i, j);
            d2[i * b + j] = v;
            d2[j * b + i] = v;
        }
    }
    let m = T::c(margin);
    let mut active = Vec::new();
    let mut total = T::zero();
    for a in 0..b {
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                let l = d2[a * b + p] - d2[a * b + n] + m;
                if l > T::zero() {
                    total += l;
                    active.push((a, p, n));
                }
            }
        }
    }
    let loss = if active.is_empty() { T::zero() } else { total / T::c(active.len() as f64) };
    Ok(g.custom(&[emb], Tensor::scalar(loss), Box::new(TripletOp { active })))
}

struct TripletOp {
    active: Vec<(usize, usize, usize)>,
}

impl<T: Scalar> CustomOp<T> for TripletOp {
    fn name(&self) -> &'static str {
        "batch_all_triplet"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dout: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let e = inputs[0];
        let mut de = Tensor::zeros(e.shape());
        if self.active.is_empty() {
            return vec![Some(de)];
        }
        let d = e.row_len();
        let s = dout.item() * T::c(2.0 / self.active.len() as f64);
        let grad = de.data_mut();
        for &(a, p, n) in &self.active {
            for k in 0..d {
                let (ea, ep, en) = (e.data()[a * d + k], e.data()[p * d + k], e.data()[n * d + k]);
                grad[a * d + k] += s * (en - ep);
                grad[p * d + k] += s * (ep - ea);
                grad[n * d + k] += s * (ea - en);
            }
        }
        vec![Some(de)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            batch_size: 32,
            epochs: 12,
            seed: 0,
            optimizer: OptimizerConfig {
                lr0: 1e-3,
                beta1: 0.9,
                ..Default::default()
            },
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.margin > 0.0) || self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::InvalidArgument(format!("bad triplet config {self:?}")));
        }
        Ok(())
    }
}

/// Stacks clip samples into a `[n, L, 1]` tensor.
pub fn wave_tensor<'a, T: Scalar>(waves: impl IntoIterator<Item = &'a [f32]>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut len = None;
    for w in waves {
        if *len.get_or_insert(w.len()) != w.len() {
            return Err(shape_err("wave batch", "clips differ in length"));
        }
        data.extend(w.iter().map(|&v| T::c(f64::from(v))));
        n += 1;
    }
    let len = len.ok_or_else(|| Error::Degenerate("empty wave batch".into()))?;
    Tensor::new(vec![n, len, 1], data)
}

/// Trains the waveform embedding with batch-all triplet mining on family
/// labels. Returns the parameters and the mean loss of every epoch.
pub fn train_audio_embedding(clips: &[LabeledClip], spec: &TrunkSpec, cfg: &TripletConfig) -> Result<(NetParams<f32>, Vec<f64>)> {
    cfg.validate()?;
    if spec.head != TrunkHead::Normalized {
        return Err(Error::InvalidArgument("embedding trunk needs a normalized head".into()));
    }
    let mut counts = std::collections::BTreeMap::new();
    for c in clips {
        *counts.entry(c.family).or_insert(0usize) += 1;
    }
    if counts.values().filter(|&&n| n >= 2).count() < 2 {
        return Err(Error::Degenerate("need two families with at least two clips each".into()));
    }
    let mut net = build_trunk::<f32>(spec, cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs as u64 {
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in batch_iterator(clips.len(), cfg.batch_size, cfg.seed, epoch)? {
            let x = wave_tensor(idx.iter().map(|&i| clips[i].wave.samples()))?;
            let labels: Vec<usize> = idx.iter().map(|&i| clips[i].family).collect();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut ctx = Ctx::train(&mut g);
            let (_, emb) = trunk_forward(&mut ctx, &mut net, spec, xv)?;
            let bindings = std::mem::take(&mut ctx.bindings);
            let loss = batch_all_triplet(&mut g, emb, &labels, cfg.margin)?;
            let grads = g.backward(loss)?;
            net.accumulate(&grads, &bindings)?;
            adam_step(&mut net, &cfg.optimizer, epoch);
            sum += f64::from(g.value(loss).item());
            batches += 1;
        }
        trace.push(sum / batches as f64);
    }
    if !net.all_finite() {
        return Err(Error::NonFinite("embedding parameters".into()));
    }
    Ok((net, trace))
}

/// Runs a trunk in inference mode over `x: [n, L, 1]`, returning
/// `(features, head outputs)`.
pub fn trunk_infer(net: &NetParams<f32>, spec: &TrunkSpec, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut net = net.clone();
    let (n, len) = (x.rows(), x.row_len());
    let (mut feat, mut out) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = Tensor::new(vec![end - start, len, 1], x.data()[start * len..end * len].to_vec())?;
        let mut g = Graph::new();
        let xv = g.constant(chunk);
        let mut ctx = Ctx::infer(&mut g);
        let (f, o) = trunk_forward(&mut ctx, &mut net, spec, xv)?;
        feat.extend_from_slice(g.value(f).data());
        out.extend_from_slice(g.value(o).data());
    }
    Ok((
        Tensor::new(vec![n, spec.feature_width()], feat)?,
        Tensor::new(vec![n, spec.out_dim], out)?,
    ))
}

/// Reciprocals of the largest pairwise distance in each component.
pub fn compute_norm_factors<R: AsRef<[f32]>, S: AsRef<[f32]>>(psi: &[R], mfcc: &[S]) -> Result<(f64, f64)> {
    if psi.len() < 2 || mfcc.len() < 2 {
        return Err(Error::Degenerate("need at least 2 clips".into()));
    }
    let (dp, dm) = (max_pairwise_distance(psi), max_pairwise_distance(mfcc));
    if !(dp > 0.0 && dm > 0.0) {
        return Err(Error::Degenerate(format!("max pairwise distance is zero (psi {dp}, mfcc {dm})")));
    }
    Ok((1.0 / dp, 1.0 / dm))
}

/// A metric feature with the scales that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeature {
    pub values: Vec<f32>,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Frozen feature extractor `phi(y) = [l1·psi(y), l2·mfcc(y)]`.
pub struct AudioMetric<T: Scalar> {
    pub psi: NetParams<T>,
    pub spec: TrunkSpec,
    pub mfcc: Arc<Mfcc<T>>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl<T: Scalar> AudioMetric<T> {
    pub fn new(psi: NetParams<T>, spec: TrunkSpec, mfcc_cfg: MfccConfig, lambda1: f64, lambda2: f64) -> Result<Self> {
        if spec.head != TrunkHead::Normalized || spec.length != mfcc_cfg.length {
            return Err(Error::InvalidArgument("embedding and MFCC configs disagree".into()));
        }
        Ok(Self {
            psi,
            spec,
            mfcc: Mfcc::new(mfcc_cfg)?,
            lambda1,
            lambda2,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.out_dim + self.mfcc.dim()
    }

    pub fn cast<U: Scalar>(&self) -> Result<AudioMetric<U>> {
        AudioMetric::new(self.psi.cast(), self.spec.clone(), self.mfcc.config().clone(), self.lambda1, self.lambda2)
    }

    /// Adds `phi(x)` for `x: [B, L, 1]` to the graph. The embedding runs in
    /// inference mode with constant parameters; gradients reach `x`.
    pub fn apply(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut ctx = Ctx::infer(g);
        let (_, psi) = trunk_forward(&mut ctx, &mut self.psi, &self.spec, x)?;
        let psi = g.scale(psi, T::c(self.lambda1));
        let m = self.mfcc.apply(g, x)?;
        let m = g.scale(m, T::c(self.lambda2));
        g.concat(psi, m)
    }

    /// `phi` of every row of `x: [n, L, 1]`, in chunks, without gradients.
    pub fn features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, len) = (x.rows(), x.row_len());
        let mut out = Vec::with_capacity(n * self.dim());
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = Tensor::new(vec![end - start, len, 1], x.data()[start * len..end * len].to_vec())?;
            let mut g = Graph::new();
            let xv = g.constant(chunk);
            let f = self.apply(&mut g, xv)?;
            out.extend_from_slice(g.value(f).data());
        }
        Tensor::new(vec![n, self.dim()], out)
    }
}

impl AudioMetric<f32> {
    pub fn audio_feature(&mut self, wave: &crate::data::Waveform) -> Result<AudioFeature> {
        let x = wave_tensor(std::iter::once(wave.samples()))?;
        Ok(AudioFeature {
            values: self.features(&x)?.into_data(),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        })
    }
}

/// Embedding and MFCC rows for a set of clips, then the scales that make
/// each component's largest pairwise distance exactly one.
pub fn norm_factors_for(psi: &NetParams<f32>, spec: &TrunkSpec, mfcc: &Mfcc<f32>, x: &Tensor<f32>) -> Result<(f64, f64)> {
    let (_, emb) = trunk_infer(psi, spec, x)?;
    let m = mfcc.compute(x)?;
    compute_norm_factors(&rows_of(&emb), &rows_of(&m))
}
