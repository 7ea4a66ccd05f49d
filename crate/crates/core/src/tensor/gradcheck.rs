//! Central finite-difference check of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(tensor, flat index, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let val = g.value(loss);
    if val.numel() != 1 || !val.is_finite() {
        return Err(Error::NonFinite(format!("loss {:?}", val.data())));
    }
    Ok((g, vars, loss))
}

fn loss_at<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, _, loss) = eval(f, inputs)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of the scalar built by `loss_fn` against
/// central differences on `probe_count` random coordinates of `inputs`.
/// Relative error uses the denominator `max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, inputs: &[Tensor<f64>], probe_count: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = eval(&loss_fn, inputs)?;
    let grads = g.backward(loss)?;
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("nothing to probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: None,
    };
    for _ in 0..probe_count {
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= inputs[ti].numel() {
            flat -= inputs[ti].numel();
            ti += 1;
        }
        let analytic = grads.get(vars[ti]).map_or(0.0, |t| t.data()[flat]);
        let orig = work[ti].data()[flat];
        work[ti].data_mut()[flat] = orig + FD_STEP;
        let up = loss_at(&loss_fn, &work)?;
        work[ti].data_mut()[flat] = orig - FD_STEP;
        let down = loss_at(&loss_fn, &work)?;
        work[ti].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        report.probes += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((ti, flat, analytic, numeric));
        }
    }
    Ok(report)
}
