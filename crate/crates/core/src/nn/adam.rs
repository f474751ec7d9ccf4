use serde::{Deserialize, Serialize};

use super::params::ParamRegistry;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First/second moment estimates, one pair of buffers per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(registry: &ParamRegistry, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = registry.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Every parameter must carry a gradient;
/// gradients are cleared afterwards.
pub fn adam_step(registry: &mut ParamRegistry, state: &mut AdamState) -> Result<()> {
    if state.m.len() != registry.len() {
        return Err(Error::invalid(format!(
            "optimizer tracks {} parameters, registry has {}",
            state.m.len(),
            registry.len()
        )));
    }
    if let Some((name, _)) = registry.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for ((_, t), (m, v)) in registry
        .iter_mut()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let grad = t.grad().expect("checked above").to_vec();
        let values = t.values_mut();
        for i in 0..values.len() {
            let gi = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    registry.clear_grads();
    Ok(())
}
