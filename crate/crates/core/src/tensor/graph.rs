//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its value and whatever it needs for the
//! backward pass. [`Graph::backward`] walks the tape in reverse. Nodes built
//! only from constants are marked as not needing gradients and are skipped,
//! so frozen networks cost a forward pass and nothing more.

use super::kernels::{self, ConvGeom};
use super::spectral::SnEstimate;
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module (MFCC, metric losses).
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; `None` for inputs that need none.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        dout: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

/// How batch norm obtains its statistics.
#[derive(Clone, Debug)]
pub enum BnStats<T> {
    /// Standardize with statistics of the current batch.
    Batch,
    /// Standardize with stored (running) mean and variance per channel.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

enum Op<T: Scalar> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, T),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cin: usize,
        cout: usize,
    },
    ConvT {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cin: usize,
        cout: usize,
    },
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
        floored: bool,
    },
    LeakyRelu(Var, T),
    Tanh(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        ids: Vec<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Permute {
        x: Var,
        src: Vec<usize>,
        channels: usize,
    },
    SumTime(Var),
    MeanTime(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Concat(Var, Var),
    RowDot(Var, Var),
    Mean(Var),
    Hinge {
        x: Var,
        sign: T,
    },
    SumSquares(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn dims3(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize)> {
    match *t {
        [b, l, c] => Ok((b, l, c)),
        _ => Err(shape_err(op, format!("expected [B, L, C], got {t:?}"))),
    }
}

fn dims2(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match *t {
        [b, d] => Ok((b, d)),
        _ => Err(shape_err(op, format!("expected [B, D], got {t:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// `x·w + b` for `x: [B, n]`, `w: [n, m]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bs, n) = dims2("dense", self.value(x).shape())?;
        let (wn, m) = dims2("dense", self.value(w).shape())?;
        if wn != n {
            return Err(shape_err("dense", format!("input width {n} vs weight rows {wn}")));
        }
        let mut out = vec![T::zero(); bs * m];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != m {
                return Err(shape_err("dense", format!("bias len {} vs {m}", bias.numel())));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias.data());
            }
        }
        T::gemm(bs, n, m, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::new(vec![bs, m], out)?, Op::Dense { x, w, b }, ng))
    }

    /// Strided cross-correlation, `x: [B, L, Cin]`, `k: [K, Cin, Cout]`.
    pub fn conv1d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (b, l, cin) = dims3("conv1d", self.value(x).shape())?;
        let (kk, kc, cout) = dims3("conv1d", self.value(k).shape())?;
        if kc != cin {
            return Err(shape_err("conv1d", format!("kernel cin {kc} vs input {cin}")));
        }
        let geom = ConvGeom::new(b, l, stride, kk).ok_or_else(|| {
            shape_err("conv1d", format!("length {l} not divisible by stride {stride}"))
        })?;
        let out = kernels::conv1d_forward(self.value(x).data(), self.value(k).data(), &geom, cin, cout);
        let ng = self.ng(&[x, k]);
        let t = Tensor::new(vec![b, geom.short, cout], out)?;
        Ok(self.push(t, Op::Conv { x, k, geom, cin, cout }, ng))
    }

    /// Upsampling transposed convolution, `x: [B, L, Cin]`, `k: [K, Cout, Cin]`,
    /// output `[B, L·stride, Cout]`.
    pub fn conv_transpose1d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (b, l, cin) = dims3("conv_transpose1d", self.value(x).shape())?;
        let (kk, cout, kc) = dims3("conv_transpose1d", self.value(k).shape())?;
        if kc != cin {
            return Err(shape_err("conv_transpose1d", format!("kernel cin {kc} vs input {cin}")));
        }
        let geom = ConvGeom::new(b, l * stride, stride, kk)
            .ok_or_else(|| shape_err("conv_transpose1d", "zero stride or kernel"))?;
        let out = kernels::conv_transpose1d_forward(
            self.value(x).data(),
            self.value(k).data(),
            &geom,
            cin,
            cout,
        );
        let ng = self.ng(&[x, k]);
        let t = Tensor::new(vec![b, geom.long, cout], out)?;
        Ok(self.push(t, Op::ConvT { x, k, geom, cin, cout }, ng))
    }

    /// `w / σ̂` with `σ̂ = vᵀ W u` computed from the current weight and the
    /// fixed singular-vector estimates in `est`.
    pub fn spectral_norm(&mut self, w: Var, est: &SnEstimate<T>) -> Result<Var> {
        let wt = self.value(w);
        let cols = *wt.shape().last().unwrap();
        let rows = wt.numel() / cols;
        if est.u.len() != cols || est.v.len() != rows {
            return Err(shape_err(
                "spectral_norm",
                format!("u/v lengths {}/{} vs matrix {rows}x{cols}", est.u.len(), est.v.len()),
            ));
        }
        let raw = super::spectral::bilinear(wt.data(), rows, cols, &est.v, &est.u);
        let floor = T::c(super::spectral::SIGMA_FLOOR);
        let (sigma, floored) = if raw > floor { (raw, false) } else { (floor, true) };
        let mut out = wt.clone();
        out.data_mut().iter_mut().for_each(|x| *x = *x / sigma);
        let ng = self.ng(&[w]);
        let op = Op::SpectralNorm {
            w,
            u: est.u.clone(),
            v: est.v.clone(),
            sigma,
            floored,
        };
        Ok(self.push(out, op, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| if *v < T::zero() { *v = *v * alpha });
        let ng = self.ng(&[x]);
        self.push(out, Op::LeakyRelu(x, alpha), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let ng = self.ng(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Batch norm over the batch and length axes of `x: [B, L, C]`, followed
    /// by a per-sample affine transform taken from row `ids[b]` of
    /// `gamma`/`beta` (`[K, C]`). Returns the batch mean and (biased)
    /// variance when they were computed.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        ids: &[usize],
        stats: BnStats<T>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (b, l, c) = dims3("batch_norm", self.value(x).shape())?;
        let (k, gc) = dims2("batch_norm", self.value(gamma).shape())?;
        if gc != c || self.value(beta).shape() != [k, c] {
            return Err(shape_err("batch_norm", "gamma/beta table shape"));
        }
        if ids.len() != b {
            return Err(shape_err("batch_norm", format!("{} ids for batch {b}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!("class id {bad} >= {k}")));
        }
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                if b * l < 2 {
                    return Err(Error::InvalidArgument("batch norm needs B·L >= 2".into()));
                }
                let n = T::c((b * l) as f64);
                let mut mean = vec![T::zero(); c];
                for row in xd.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in xd.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / n);
                (mean, var, true)
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running stats length"));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let gr = &g[ids[bi] * c..(ids[bi] + 1) * c];
            let br = &bt[ids[bi] * c..(ids[bi] + 1) * c];
            for t in 0..l {
                let off = (bi * l + t) * c;
                for ch in 0..c {
                    let h = (xd[off + ch] - mean[ch]) * inv_std[ch];
                    xhat[off + ch] = h;
                    out[off + ch] = h * gr[ch] + br[ch];
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        let t = Tensor::new(vec![b, l, c], out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ids: ids.to_vec(),
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Rows `ids` of `table: [K, d]` as a `[B, d]` tensor.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (k, d) = dims2("gather", self.value(table).shape())?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!("embedding id {bad} >= {k}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    /// Per-sample circular-free shift of `x: [B, L, C]` along time, with
    /// reflected boundaries.
    pub fn phase_shuffle(&mut self, x: Var, shifts: &[isize]) -> Result<Var> {
        let (b, l, c) = dims3("phase_shuffle", self.value(x).shape())?;
        if shifts.len() != b {
            return Err(shape_err("phase_shuffle", "one shift per sample"));
        }
        if let Some(&s) = shifts.iter().find(|s| s.unsigned_abs() >= l) {
            return Err(Error::InvalidArgument(format!("shift {s} >= length {l}")));
        }
        let src = kernels::phase_shuffle_index(shifts, l);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        for (bi, chunk) in src.chunks(l).enumerate() {
            for &t in chunk {
                let off = (bi * l + t) * c;
                out.extend_from_slice(&xd[off..off + c]);
            }
        }
        let ng = self.ng(&[x]);
        let t = Tensor::new(vec![b, l, c], out)?;
        Ok(self.push(t, Op::Permute { x, src, channels: c }, ng))
    }

    fn reduce_time(&mut self, x: Var, mean: bool) -> Result<Var> {
        let (b, l, c) = dims3("reduce_time", self.value(x).shape())?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            for t in 0..l {
                let off = (bi * l + t) * c;
                for ch in 0..c {
                    out[bi * c + ch] += xd[off + ch];
                }
            }
        }
        if mean {
            let inv = T::one() / T::c(l as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let ng = self.ng(&[x]);
        let t = Tensor::new(vec![b, c], out)?;
        let op = if mean { Op::MeanTime(x) } else { Op::SumTime(x) };
        Ok(self.push(t, op, ng))
    }

    /// Sum over the time axis: `[B, L, C] -> [B, C]`.
    pub fn sum_time(&mut self, x: Var) -> Result<Var> {
        self.reduce_time(x, false)
    }

    /// Mean over the time axis: `[B, L, C] -> [B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        self.reduce_time(x, true)
    }

    /// Unit-normalizes each row of `x: [B, D]`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (b, d) = dims2("l2_normalize", self.value(x).shape())?;
        let xd = self.value(x).data();
        let floor = T::c(1e-12);
        let mut norms = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let ng = self.ng(&[x]);
        let t = Tensor::new(vec![b, d], out)?;
        Ok(self.push(t, Op::L2Normalize { x, norms }, ng))
    }

    /// Concatenates two `[B, *]` tensors along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, da) = dims2("concat", self.value(a).shape())?;
        let (bb, db) = dims2("concat", self.value(b).shape())?;
        if ba != bb {
            return Err(shape_err("concat", format!("batch {ba} vs {bb}")));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (da + db));
        for i in 0..ba {
            out.extend_from_slice(&xa[i * da..(i + 1) * da]);
            out.extend_from_slice(&xb[i * db..(i + 1) * db]);
        }
        let ng = self.ng(&[a, b]);
        let t = Tensor::new(vec![ba, da + db], out)?;
        Ok(self.push(t, Op::Concat(a, b), ng))
    }

    /// Row-wise inner product: `[B, D] × [B, D] -> [B, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, d) = dims2("row_dot", self.value(a).shape())?;
        if self.value(b).shape() != [ba, d] {
            return Err(shape_err("row_dot", "operand shapes differ"));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = (0..ba)
            .map(|i| {
                xa[i * d..(i + 1) * d]
                    .iter()
                    .zip(&xb[i * d..(i + 1) * d])
                    .map(|(&p, &q)| p * q)
                    .sum()
            })
            .collect();
        let ng = self.ng(&[a, b]);
        let t = Tensor::new(vec![ba, 1], out)?;
        Ok(self.push(t, Op::RowDot(a, b), ng))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / T::c(t.numel() as f64);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// `mean(max(0, 1 + sign·x))`: `sign = -1` for real scores, `+1` for fake.
    pub fn hinge(&mut self, x: Var, sign: T) -> Var {
        let t = self.value(x);
        let m = t
            .data()
            .iter()
            .map(|&v| (T::one() + sign * v).max(T::zero()))
            .sum::<T>()
            / T::c(t.numel() as f64);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(m), Op::Hinge { x, sign }, ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<T>();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = dims2("softmax_cross_entropy", self.value(logits).shape())?;
        if labels.len() != b {
            return Err(shape_err("softmax_cross_entropy", "one label per row"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {k}")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let tiny = T::c(1e-30);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -(probs[i * k + y].max(tiny)).ln())
            .sum::<T>()
            / T::c(b as f64);
        let ng = self.ng(&[logits]);
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, ng))
    }

    /// Registers an externally computed value with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let ng = self.ng(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", lt.shape())));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lt.item())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            self.backward_node(node, &dout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.want(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.value(v).shape())
    }

    fn with_shape(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape matches value")
    }

    fn backward_node(&self, node: &Node<T>, dout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dy = dout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.acc(grads, *x, self.with_shape(*x, dy.to_vec())),
            Op::Add(a, b) => {
                self.acc(grads, *a, dout.clone());
                self.acc(grads, *b, dout.clone());
            }
            Op::Scale(x, c) => {
                let g = dy.iter().map(|&v| v * *c).collect();
                self.acc(grads, *x, self.with_shape(*x, g));
            }
            Op::Dense { x, w, b } => {
                let (bs, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let m = self.value(*w).shape()[1];
                if self.want(*x) {
                    let mut dx = vec![T::zero(); bs * n];
                    T::gemm(bs, m, n, dy, false, self.value(*w).data(), true, &mut dx, false);
                    self.acc(grads, *x, self.with_shape(*x, dx));
                }
                if self.want(*w) {
                    let mut dw = vec![T::zero(); n * m];
                    T::gemm(n, bs, m, self.value(*x).data(), true, dy, false, &mut dw, false);
                    self.acc(grads, *w, self.with_shape(*w, dw));
                }
                if let Some(b) = b {
                    if self.want(*b) {
                        let mut db = vec![T::zero(); m];
                        for row in dy.chunks(m) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(grads, *b, self.with_shape(*b, db));
                    }
                }
            }
            Op::Conv { x, k, geom, cin, cout } => {
                let mut dx = self.want(*x).then(|| self.zeros_like(*x));
                let mut dk = self.want(*k).then(|| self.zeros_like(*k));
                kernels::conv1d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    dy,
                    geom,
                    *cin,
                    *cout,
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.acc(grads, *k, dk);
                }
            }
            Op::ConvT { x, k, geom, cin, cout } => {
                let mut dx = self.want(*x).then(|| self.zeros_like(*x));
                let mut dk = self.want(*k).then(|| self.zeros_like(*k));
                kernels::conv_transpose1d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    dy,
                    geom,
                    *cin,
                    *cout,
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.acc(grads, *k, dk);
                }
            }
            Op::SpectralNorm { w, u, v, sigma, floored } => {
                // d(W/σ) with σ = vᵀWu: G/σ - (<G, W>/σ²) v uᵀ
                let wd = self.value(*w).data();
                let inv = T::one() / *sigma;
                let mut g: Vec<T> = dy.iter().map(|&d| d * inv).collect();
                if !floored {
                    let gw: T = dy.iter().zip(wd).map(|(&a, &b)| a * b).sum();
                    let coef = gw * inv * inv;
                    let cols = u.len();
                    for (r, &vr) in v.iter().enumerate() {
                        for (cidx, &uc) in u.iter().enumerate() {
                            g[r * cols + cidx] -= coef * vr * uc;
                        }
                    }
                }
                self.acc(grads, *w, self.with_shape(*w, g));
            }
            Op::LeakyRelu(x, alpha) => {
                let xd = self.value(*x).data();
                let g = dy
                    .iter()
                    .zip(xd)
                    .map(|(&d, &v)| if v < T::zero() { d * *alpha } else { d })
                    .collect();
                self.acc(grads, *x, self.with_shape(*x, g));
            }
            Op::Tanh(x) => {
                let yd = node.value.data();
                let g = dy.iter().zip(yd).map(|(&d, &y)| d * (T::one() - y * y)).collect();
                self.acc(grads, *x, self.with_shape(*x, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ids,
                xhat,
                inv_std,
                batch_stats,
            } => self.batch_norm_backward(
                grads, dy, *x, *gamma, *beta, ids, xhat, inv_std, *batch_stats,
            ),
            Op::Gather { table, ids } => {
                let mut g = self.zeros_like(*table);
                let d = g.shape()[1];
                for (r, &i) in ids.iter().enumerate() {
                    for (a, &b) in g.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                self.acc(grads, *table, g);
            }
            Op::Permute { x, src, channels } => {
                let c = *channels;
                let l = node.value.shape()[1];
                let mut g = self.zeros_like(*x);
                let gd = g.data_mut();
                for (pos, &t) in src.iter().enumerate() {
                    let b = pos / l;
                    let dst = (b * l + t) * c;
                    for ch in 0..c {
                        gd[dst + ch] += dy[pos * c + ch];
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::SumTime(x) | Op::MeanTime(x) => {
                let shape = self.value(*x).shape();
                let (b, l, c) = (shape[0], shape[1], shape[2]);
                let scale = if matches!(node.op, Op::MeanTime(_)) {
                    T::one() / T::c(l as f64)
                } else {
                    T::one()
                };
                let mut g = Vec::with_capacity(b * l * c);
                for bi in 0..b {
                    for _ in 0..l {
                        g.extend(dy[bi * c..(bi + 1) * c].iter().map(|&v| v * scale));
                    }
                }
                self.acc(grads, *x, self.with_shape(*x, g));
            }
            Op::L2Normalize { x, norms } => {
                let yd = node.value.data();
                let d = node.value.shape()[1];
                let mut g = Vec::with_capacity(yd.len());
                for (i, &n) in norms.iter().enumerate() {
                    let y = &yd[i * d..(i + 1) * d];
                    let gy = &dy[i * d..(i + 1) * d];
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    g.extend(y.iter().zip(gy).map(|(&yv, &gv)| (gv - yv * dot) / n));
                }
                self.acc(grads, *x, self.with_shape(*x, g));
            }
            Op::Concat(a, b) => {
                let da = self.value(*a).shape()[1];
                let db = self.value(*b).shape()[1];
                let rows = node.value.shape()[0];
                let (mut ga, mut gb) = (Vec::with_capacity(rows * da), Vec::with_capacity(rows * db));
                for row in dy.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                self.acc(grads, *a, self.with_shape(*a, ga));
                self.acc(grads, *b, self.with_shape(*b, gb));
            }
            Op::RowDot(a, b) => {
                let d = self.value(*a).shape()[1];
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let scale_rows = |src: &[T]| -> Vec<T> {
                    src.chunks(d)
                        .zip(dy)
                        .flat_map(|(row, &g)| row.iter().map(move |&v| v * g))
                        .collect()
                };
                if self.want(*a) {
                    self.acc(grads, *a, self.with_shape(*a, scale_rows(xb)));
                }
                if self.want(*b) {
                    self.acc(grads, *b, self.with_shape(*b, scale_rows(xa)));
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = vec![dy[0] / T::c(n as f64); n];
                self.acc(grads, *x, self.with_shape(*x, g));
            }
            Op::Hinge { x, sign } => {
                let xd = self.value(*x).data();
                let scale = dy[0] / T::c(xd.len() as f64);
                let g = xd
                    .iter()
                    .map(|&v| {
                        if T::one() + *sign * v > T::zero() {
                            *sign * scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *x, self.with_shape(*x, g));
            }
            Op::SumSquares(x) => {
                let two = T::c(2.0) * dy[0];
                let g = self.value(*x).data().iter().map(|&v| two * v).collect();
                self.acc(grads, *x, self.with_shape(*x, g));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let scale = dy[0] / T::c(labels.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    g[i * k + y] -= scale;
                }
                self.acc(grads, *logits, self.with_shape(*logits, g));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.want(*v)).collect();
                let gs = op.backward(&vals, &node.value, dout, &needs);
                for (v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        self.acc(grads, *v, g);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        dy: &[T],
        x: Var,
        gamma: Var,
        beta: Var,
        ids: &[usize],
        xhat: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) {
        let shape = self.value(x).shape();
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        let g = self.value(gamma).data();
        if self.want(gamma) || self.want(beta) {
            let mut dg = self.zeros_like(gamma);
            let mut db = self.zeros_like(beta);
            for bi in 0..b {
                let r = ids[bi] * c;
                for t in 0..l {
                    let off = (bi * l + t) * c;
                    for ch in 0..c {
                        dg.data_mut()[r + ch] += dy[off + ch] * xhat[off + ch];
                        db.data_mut()[r + ch] += dy[off + ch];
                    }
                }
            }
            self.acc(grads, gamma, dg);
            self.acc(grads, beta, db);
        }
        if !self.want(x) {
            return;
        }
        let mut dxhat = vec![T::zero(); dy.len()];
        for bi in 0..b {
            let gr = &g[ids[bi] * c..(ids[bi] + 1) * c];
            for t in 0..l {
                let off = (bi * l + t) * c;
                for ch in 0..c {
                    dxhat[off + ch] = dy[off + ch] * gr[ch];
                }
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        if batch_stats {
            let n = T::c((b * l) as f64);
            let mut s1 = vec![T::zero(); c];
            let mut s2 = vec![T::zero(); c];
            for (row, hrow) in dxhat.chunks(c).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    s1[ch] += row[ch];
                    s2[ch] += row[ch] * hrow[ch];
                }
            }
            for ((drow, row), hrow) in dx.chunks_mut(c).zip(dxhat.chunks(c)).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    drow[ch] = inv_std[ch] / n * (n * row[ch] - s1[ch] - hrow[ch] * s2[ch]);
                }
            }
        } else {
            for (drow, row) in dx.chunks_mut(c).zip(dxhat.chunks(c)) {
                for ch in 0..c {
                    drow[ch] = row[ch] * inv_std[ch];
                }
            }
        }
        self.acc(grads, x, self.with_shape(x, dx));
    }
}

/// Row-wise numerically stable softmax of a `[rows, k]` buffer.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}
