//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diffcore::{Float, Tensor};
use crate::encoders::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Float> OptimState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |p: &ParamStore<T>| {
            ParamStore::from_map(p.iter().map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape()))).collect())
        };
        OptimState { config, step: 0, m: zeros(params), v: zeros(params) }
    }
}

/// Gradient arrays keyed by parameter name.
pub type Grads<T> = BTreeMap<String, Vec<T>>;

/// Euclidean norm over every gradient entry.
pub fn global_norm<T: Float>(grads: &Grads<T>) -> f64 {
    grads.values().flatten().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / (norm + 1e-6));
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One AdamW update of every parameter that has a gradient:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, bias-corrected, then
/// `θ ← θ − lr (m̂ / (√v̂ + ε) + λθ)`. Nothing changes if any gradient is
/// non-finite.
pub fn adamw_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| TrainError::Optimizer(format!("gradient for unknown parameter '{name}'")))?;
        if p.numel() != g.len() {
            return Err(TrainError::Optimizer(format!("'{name}': {} gradient values for {} parameters", g.len(), p.numel())));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite(format!("gradient of '{name}' at index {pos}")));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, g) in grads {
        let theta = params.get_mut(name).expect("checked above").data_mut();
        let m = state.m.get_mut(name).expect("moments follow parameters").data_mut();
        let v = state.v.get_mut(name).expect("moments follow parameters").data_mut();
        for i in 0..g.len() {
            let gi = g[i].to_f64().unwrap();
            let mi = c.beta1 * m[i].to_f64().unwrap() + (1.0 - c.beta1) * gi;
            let vi = c.beta2 * v[i].to_f64().unwrap() + (1.0 - c.beta2) * gi * gi;
            m[i] = T::c(mi);
            v[i] = T::c(vi);
            let th = theta[i].to_f64().unwrap();
            let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps) + c.weight_decay * th;
            theta[i] = T::c(th - lr * update);
        }
    }
    Ok(())
}
