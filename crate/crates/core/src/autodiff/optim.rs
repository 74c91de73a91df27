//! Adaptive-moment optimizer with linear warmup and inverse-square-root decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{GradStore, ParamSet, ParamStore};
use crate::error::{Result, SluError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { peak_lr: 2e-3, warmup_steps: 200, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

impl AdamConfig {
    /// Learning rate used for the `step`-th update (1-based).
    pub fn learning_rate(&self, step: u64) -> f64 {
        let t = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.peak_lr;
        }
        let w = self.warmup_steps as f64;
        self.peak_lr * (t / w).min((w / t).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    /// Moment buffers keyed by parameter name.
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState { config, step: 0, moments: BTreeMap::new() }
    }
}

/// One update of every parameter in `params` from `grads`.
pub fn optimizer_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    grads: &GradStore,
    params: &ParamSet,
) -> Result<()> {
    for id in params.iter() {
        if grads.get(id).is_none() {
            return Err(SluError::MissingGradient(store.get(id).name.clone()));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let lr = cfg.learning_rate(state.step);
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in params.iter() {
        let g = grads.get(id).expect("checked above");
        let name = store.get(id).name.clone();
        let n = g.len();
        let m = state
            .moments
            .entry(name)
            .or_insert_with(|| Moments { first: vec![0.0; n], second: vec![0.0; n] });
        if m.first.len() != n {
            return Err(SluError::Shape { op: "optimizer_step", lhs: vec![m.first.len()], rhs: vec![n] });
        }
        let w = store.value_mut(id);
        for i in 0..n {
            m.first[i] = cfg.beta1 * m.first[i] + (1.0 - cfg.beta1) * g[i];
            m.second[i] = cfg.beta2 * m.second[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m.first[i] / bc1;
            let vhat = m.second[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
