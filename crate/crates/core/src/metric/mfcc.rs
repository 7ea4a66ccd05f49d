//! MFCC pipeline with a reverse-mode rule, so cepstral distances can be
//! back-propagated into the waveform.
//!
//! Frames of 1024 samples every 256 (no padding), periodic Hann window,
//! power spectrum, 80 HTK-mel triangles over 80 to 7600 Hz, natural log with
//! a 1e-6 floor, orthonormal DCT-II, first 13 coefficients.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::SAMPLE_RATE;
use crate::error::{shape_err, Error, Result};
use crate::tensor::graph::CustomOp;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub length: usize,
    pub frame: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_coeffs: usize,
    pub log_floor: f64,
    pub sample_rate: u32,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            length: 8192,
            frame: 1024,
            hop: 256,
            n_mels: 80,
            f_min: 80.0,
            f_max: 7600.0,
            n_coeffs: 13,
            log_floor: 1e-6,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl MfccConfig {
    pub fn n_frames(&self) -> usize {
        (self.length - self.frame) / self.hop + 1
    }

    pub fn n_bins(&self) -> usize {
        self.frame / 2 + 1
    }

    /// Length of the flattened feature.
    pub fn dim(&self) -> usize {
        self.n_frames() * self.n_coeffs
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = f64::from(self.sample_rate) / 2.0;
        let ok = self.frame >= 2
            && self.hop > 0
            && self.length >= self.frame
            && self.n_mels > 0
            && self.n_coeffs > 0
            && self.n_coeffs <= self.n_mels
            && 0.0 <= self.f_min
            && self.f_min < self.f_max
            && self.f_max <= nyquist
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent MFCC config {self:?}")))
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

/// `[n_bins, n_mels]` triangular weights, computed in the mel domain; the
/// DC bin gets no weight.
pub fn mel_matrix(cfg: &MfccConfig) -> Vec<f64> {
    let (nb, nm) = (cfg.n_bins(), cfg.n_mels);
    let nyquist = f64::from(cfg.sample_rate) / 2.0;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..nm + 2).map(|i| lo + (hi - lo) * i as f64 / (nm + 1) as f64).collect();
    let mut w = vec![0.0; nb * nm];
    for bin in 1..nb {
        let mel = hz_to_mel(nyquist * bin as f64 / (nb - 1) as f64);
        for m in 0..nm {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let up = (mel - l) / (c - l);
            let down = (r - mel) / (r - c);
            w[bin * nm + m] = up.min(down).max(0.0);
        }
    }
    w
}

/// `[n_mels, n_coeffs]` orthonormal DCT-II basis, truncated.
pub fn dct_matrix(n: usize, keep: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * keep];
    for i in 0..n {
        for k in 0..keep {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            d[i * keep + k] = s * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    d
}

/// Precomputed window, filterbank, DCT basis and FFT plans.
pub struct Mfcc<T: Scalar> {
    cfg: MfccConfig,
    window: Vec<T>,
    mel: Vec<T>,
    dct: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Mfcc<T> {
    pub fn new(cfg: MfccConfig) -> Result<Arc<Self>> {
        cfg.validate()?;
        let n = cfg.frame;
        let window = (0..n)
            .map(|i| T::c(0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()))
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Self {
            window,
            mel: mel_matrix(&cfg).into_iter().map(T::c).collect(),
            dct: dct_matrix(cfg.n_mels, cfg.n_coeffs).into_iter().map(T::c).collect(),
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            cfg,
        }))
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim()
    }

    /// Rows of `[B, L]` (or `[B, L, 1]`) to `[B, frames·coeffs]`, plus the
    /// spectra and mel energies the backward pass needs.
    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Complex<T>>, Vec<T>)> {
        let c = &self.cfg;
        if x.numel() != x.rows() * c.length || !matches!(x.shape(), [_, l] | [_, l, 1] if *l == c.length) {
            return Err(shape_err("mfcc", format!("expected [B, {}], got {:?}", c.length, x.shape())));
        }
        let (b, nf, nb, nm, nc) = (x.rows(), c.n_frames(), c.n_bins(), c.n_mels, c.n_coeffs);
        let mut spectra = vec![Complex::new(T::zero(), T::zero()); b * nf * c.frame];
        for (s, chunk) in spectra.chunks_exact_mut(nf * c.frame).enumerate() {
            let wave = x.row(s);
            for (f, buf) in chunk.chunks_exact_mut(c.frame).enumerate() {
                let seg = &wave[f * c.hop..f * c.hop + c.frame];
                for ((o, &v), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                    *o = Complex::new(v * w, T::zero());
                }
            }
        }
        self.fwd.process(&mut spectra);
        let rows = b * nf;
        let mut power = vec![T::zero(); rows * nb];
        for (p, spec) in power.chunks_exact_mut(nb).zip(spectra.chunks_exact(c.frame)) {
            for (pk, xk) in p.iter_mut().zip(spec) {
                *pk = xk.norm_sqr();
            }
        }
        let mut energy = vec![T::zero(); rows * nm];
        T::gemm(rows, nb, nm, &power, false, &self.mel, false, &mut energy, false);
        let floor = T::c(c.log_floor);
        let logmel: Vec<T> = energy.iter().map(|&e| (e + floor).ln()).collect();
        let mut out = vec![T::zero(); rows * nc];
        T::gemm(rows, nm, nc, &logmel, false, &self.dct, false, &mut out, false);
        Ok((Tensor::new(vec![b, nf * nc], out)?, spectra, energy))
    }

    /// Features without gradient bookkeeping.
    pub fn compute(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    /// Adds the MFCC of `x` to the graph; gradients flow back into `x`.
    pub fn apply(self: &Arc<Self>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (out, spectra, energy) = self.run(g.value(x))?;
        let op = MfccOp {
            plan: Arc::clone(self),
            spectra,
            energy,
        };
        Ok(g.custom(&[x], out, Box::new(op)))
    }
}

struct MfccOp<T: Scalar> {
    plan: Arc<Mfcc<T>>,
    spectra: Vec<Complex<T>>,
    energy: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for MfccOp<T> {
    fn name(&self) -> &'static str {
        "mfcc"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dout: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let p = &*self.plan;
        let c = &p.cfg;
        let x = inputs[0];
        let (b, nf, nb, nm, nc) = (x.rows(), c.n_frames(), c.n_bins(), c.n_mels, c.n_coeffs);
        let rows = b * nf;
        let mut dlog = vec![T::zero(); rows * nm];
        T::gemm(rows, nc, nm, dout.data(), false, &p.dct, true, &mut dlog, false);
        let floor = T::c(c.log_floor);
        for (d, &e) in dlog.iter_mut().zip(&self.energy) {
            *d = *d / (e + floor);
        }
        let mut dpow = vec![T::zero(); rows * nb];
        T::gemm(rows, nm, nb, &dlog, false, &p.mel, true, &mut dpow, false);
        // d|X_k|^2 / dx_n summed over k is 2 Re(IFFT(g ∘ X))_n over the half spectrum
        let zero = Complex::new(T::zero(), T::zero());
        let mut work = vec![zero; rows * c.frame];
        for ((w, spec), g) in work.chunks_exact_mut(c.frame).zip(self.spectra.chunks_exact(c.frame)).zip(dpow.chunks_exact(nb)) {
            for k in 0..nb {
                w[k] = spec[k] * g[k];
            }
        }
        p.inv.process(&mut work);
        let two = T::c(2.0);
        let mut dx = Tensor::zeros(x.shape());
        let len = c.length;
        for (s, dxs) in dx.data_mut().chunks_exact_mut(len).enumerate() {
            for f in 0..nf {
                let w = &work[(s * nf + f) * c.frame..(s * nf + f + 1) * c.frame];
                let dst = &mut dxs[f * c.hop..f * c.hop + c.frame];
                for ((d, y), &win) in dst.iter_mut().zip(w).zip(&p.window) {
                    *d += two * y.re * win;
                }
            }
        }
        vec![Some(dx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_dims() {
        let c = MfccConfig::default();
        assert_eq!((c.n_frames(), c.n_bins(), c.dim()), (29, 513, 377));
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix(80, 80);
        for a in 0..80 {
            for b in 0..80 {
                let dot: f64 = (0..80).map(|i| d[i * 80 + a] * d[i * 80 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filterbank_triangles_peak_below_one() {
        let c = MfccConfig::default();
        let w = mel_matrix(&c);
        assert!(w[..c.n_mels].iter().all(|&v| v == 0.0));
        for m in 0..c.n_mels {
            let col: Vec<f64> = (0..c.n_bins()).map(|b| w[b * c.n_mels + m]).collect();
            let peak = col.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.0 && peak <= 1.0, "band {m} peak {peak}");
        }
    }
}
