use serde::{Deserialize, Serialize};

use super::{NetParams, Scalar};
use crate::error::{Error, Result};

/// Adam hyper-parameters with an exponential learning-rate decay
/// `lr0 · decay_rate^(epoch / decay_steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate: 0.9,
            decay_steps: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_rate > 0.0
            && self.decay_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad optimizer config {self:?}")))
        }
    }

    pub fn lr(&self, epoch: u64) -> f64 {
        self.lr0 * self.decay_rate.powf(epoch as f64 / self.decay_steps as f64)
    }
}

/// One bias-corrected Adam update of every parameter in `net`, then clears
/// the gradients. Returns the learning rate used.
pub fn adam_step<T: Scalar>(net: &mut NetParams<T>, cfg: &OptimizerConfig, epoch: u64) -> f64 {
    net.adam_t += 1;
    let t = net.adam_t as i32;
    let lr = cfg.lr(epoch);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::c(1.0 - cfg.beta1.powi(t));
    let c2 = T::c(1.0 - cfg.beta2.powi(t));
    let (lr_t, eps) = (T::c(lr), T::c(cfg.eps));
    for p in net.params.values_mut() {
        let g = p.grad.data();
        let m = p.adam_m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
        }
        let v = p.adam_v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
        }
        let (m, v) = (p.adam_m.data(), p.adam_v.data());
        let w = p.value.data_mut();
        for ((wi, &mi), &vi) in w.iter_mut().zip(m).zip(v) {
            let mhat = mi / c1;
            let vhat = vi / c2;
            *wi -= lr_t * mhat / (vhat.sqrt() + eps);
        }
        p.zero_grad();
    }
    lr
}
