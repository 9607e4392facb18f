//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::tape::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        OptimizerState { cfg, step: 0, m, v }
    }
}

/// One AdamW update. Slots without a gradient are left untouched (params,
/// moments, and decay alike). A non-finite gradient rejects the whole step
/// before any state is mutated.
pub fn adamw_step(state: &mut OptimizerState, store: &mut ParamStore, grads: &Grads) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient rejected by adamw_step".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let cfg = state.cfg;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (slot, g) in grads.by_slot.iter().enumerate() {
        let Some(g) = g else { continue };
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let p = &mut store.get_mut(crate::math::tape::ParamId(slot)).data;
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}
