//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::ParameterSet;
use crate::error::{DnaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; `0` disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, carried alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

pub fn global_norm(grads: &ParameterSet) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scale `grads` in place so their global norm is at most `max_norm`.
/// Returns the pre-clipping norm.
pub fn clip_global_norm(grads: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// One AdamW step. Gradients are validated before anything is modified.
pub fn apply_gradients(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    config: &OptimConfig,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(DnaError::Structural(
            "gradient or optimizer state shape does not match parameters".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(DnaError::Numeric("non-finite gradient".into()));
    }
    let mut grads = grads.clone();
    clip_global_norm(&mut grads, config.grad_clip);

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - config.lr * config.weight_decay;

    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}
