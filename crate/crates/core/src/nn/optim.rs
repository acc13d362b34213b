use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update on raw buffers.
pub fn adam_update(values: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..values.len() {
        let g = grad[i] + cfg.weight_decay * values[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies the gradients stored on the parameter tensors, then clears them.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != state.m.len() {
        return Err(Error::Shape("optimizer state does not match the model".into()));
    }
    state.step += 1;
    for (k, t) in tensors.iter_mut().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let Some(grad) = t.grad.take() else { continue };
        if state.m[k].len() != t.values.len() {
            return Err(Error::Shape(format!("optimizer state for tensor {k} has the wrong size")));
        }
        adam_update(&mut t.values, &grad, &mut state.m[k], &mut state.v[k], state.step, cfg);
    }
    Ok(())
}
