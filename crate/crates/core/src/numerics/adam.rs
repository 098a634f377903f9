use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one buffer per trainable slot.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Params>(params: &P, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params
            .slots()
            .into_iter()
            .filter(|s| s.trainable)
            .map(|s| s.data.len())
            .collect();
        AdamState {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One bias-corrected Adam update of every trainable slot.
///
/// Gradients are scanned for non-finite values before anything is mutated, so
/// a failed step leaves both parameters and state untouched.
pub fn adam_step<P: Params>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let grad_slots: Vec<_> = grads.slots().into_iter().filter(|s| s.trainable).collect();
    if grad_slots.len() != state.first.len() {
        return Err(Error::dim("adam gradient groups", state.first.len(), grad_slots.len()));
    }
    for g in &grad_slots {
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", g.name)));
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let param_slots = params.slots_mut().into_iter().filter(|s| s.trainable);
    for (((p, g), m), v) in param_slots
        .zip(&grad_slots)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        if p.data.len() != g.data.len() {
            return Err(Error::dim("adam parameter", p.data.len(), g.data.len()));
        }
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
