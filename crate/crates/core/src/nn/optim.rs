use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, lr: f64, cfg: &AdamConfig) {
    store.steps += 1;
    let t = store.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one, eps) = (T::one(), T::from_f64_lossy(cfg.eps));
    let step = T::from_f64_lossy(lr / c1);
    let c2 = T::from_f64_lossy(c2);
    for id in 0..store.len() {
        let p = store.get_mut(super::params::ParamId(id));
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        for i in 0..n {
            let g = p.grad.data()[i];
            let m = b1 * p.m.data()[i] + (one - b1) * g;
            let v = b2 * p.v.data()[i] + (one - b2) * g * g;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            p.value.data_mut()[i] -= step * m / ((v / c2).sqrt() + eps);
        }
    }
}

/// Rescales the gradients of trainable parameters so their joint L2 norm is
/// at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for id in 0..store.len() {
        let p = store.get_mut(super::params::ParamId(id));
        if p.trainable {
            sq += p.grad.data().iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::from_f64_lossy(max_norm / norm);
        for id in 0..store.len() {
            let p = store.get_mut(super::params::ParamId(id));
            if p.trainable {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
    }
    norm
}
