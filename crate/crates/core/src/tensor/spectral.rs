//! Power-iteration estimate of a weight's top singular value.
//!
//! A weight of any rank is viewed as a matrix with its last axis as columns
//! (the output axis for dense and conv kernels). The persistent vector `u`
//! lives in column space, `v = normalize(W u)` in row space, and
//! `σ̂ = vᵀ W u`.

use super::{ParamTensor, Scalar};

pub const SIGMA_FLOOR: f64 = 1e-12;

/// Singular-vector pair and the resulting estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct SnEstimate<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub sigma: T,
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

fn normalize<T: Scalar>(x: &mut [T]) {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if n > T::c(SIGMA_FLOOR) {
        x.iter_mut().for_each(|v| *v = *v / n);
    }
}

fn mat_vec<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<T> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(u).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn mat_t_vec<T: Scalar>(w: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for (r, &vr) in v.iter().enumerate().take(rows) {
        for (o, &a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * vr;
        }
    }
    out
}

/// `vᵀ W u`.
pub fn bilinear<T: Scalar>(w: &[T], rows: usize, cols: usize, v: &[T], u: &[T]) -> T {
    mat_vec(w, rows, cols, u).iter().zip(v).map(|(&a, &b)| a * b).sum()
}

/// Runs `iters` power iterations from `u` and returns the estimate. With
/// `iters == 0` the given `u` is kept and only `v` is derived from it.
pub fn power_iteration<T: Scalar>(w: &[T], shape: &[usize], u: &[T], iters: usize) -> SnEstimate<T> {
    let (rows, cols) = matrix_dims(shape);
    let mut u = u.to_vec();
    let mut v = mat_vec(w, rows, cols, &u);
    normalize(&mut v);
    for _ in 0..iters {
        u = mat_t_vec(w, rows, cols, &v);
        normalize(&mut u);
        v = mat_vec(w, rows, cols, &u);
        normalize(&mut v);
    }
    let sigma = bilinear(w, rows, cols, &v, &u).max(T::c(SIGMA_FLOOR));
    SnEstimate { u, v, sigma }
}

/// Updates the parameter's persistent `u` with `iters` power iterations and
/// returns `σ̂`, floored at 1e-12 for an all-zero weight.
///
/// Panics if the parameter was not created with spectral normalization.
pub fn spectral_normalize<T: Scalar>(p: &mut ParamTensor<T>, iters: usize) -> SnEstimate<T> {
    let u = p.sn_u.as_ref().expect("parameter has no spectral-norm vector");
    let est = power_iteration(p.value.data(), p.value.shape(), u, iters);
    p.sn_u = Some(est.u.clone());
    est
}

/// Top singular value by many power iterations from a fixed start. Used to
/// audit effective weights; independent of any stored `u`.
pub fn top_singular_value<T: Scalar>(w: &[T], shape: &[usize], iters: usize) -> f64 {
    let (_, cols) = matrix_dims(shape);
    let start: Vec<T> = (0..cols).map(|i| T::c(1.0 + 0.01 * (i % 7) as f64)).collect();
    power_iteration(w, shape, &start, iters).sigma.as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sn_param(w: Tensor<f64>) -> ParamTensor<f64> {
        let cols = *w.shape().last().unwrap();
        let mut p = ParamTensor::new(w);
        let mut u = vec![1.0; cols];
        normalize(&mut u);
        p.sn_u = Some(u);
        p
    }

    #[test]
    fn diagonal_converges_to_largest_entry() {
        let w = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut p = sn_param(w);
        let est = spectral_normalize(&mut p, 50);
        assert!((est.sigma - 3.0).abs() < 1e-9);
        let n: f64 = p.sn_u.as_ref().unwrap().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_offdiagonal() {
        let w = Tensor::new(vec![2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let mut p = sn_param(w);
        assert!((spectral_normalize(&mut p, 30).sigma - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix_is_floored() {
        let mut p = sn_param(Tensor::zeros(&[3, 2]));
        assert_eq!(spectral_normalize(&mut p, 5).sigma, SIGMA_FLOOR);
    }
}
