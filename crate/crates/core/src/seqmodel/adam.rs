use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{GradBuffer, ParamVector};
use crate::error::{structural, Result};
use crate::math::sqrt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn for_params(params: &ParamVector) -> Self {
        Self::new(params.len(), AdamConfig::default())
    }
}

/// One bias-corrected Adam descent step on `params`.
pub fn adam_step(
    params: &mut ParamVector,
    grads: &GradBuffer,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(structural("optimizer state, gradient and parameter layouts differ"));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let bc1 = 1.0 - libm::pow(beta1, state.t as f64);
    let bc2 = 1.0 - libm::pow(beta2, state.t as f64);
    for i in 0..params.len() {
        let g = grads.values[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        if lr != 0.0 {
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            params.values[i] -= lr * mhat / (sqrt(vhat) + eps);
        }
    }
    Ok(())
}
