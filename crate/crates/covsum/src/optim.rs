//! Adam with bias correction.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("adam: non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },
    #[error("adam: {params} parameters vs {grads} gradient entries")]
    LengthMismatch { params: usize, grads: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-tensor moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(OptimError::LengthMismatch { params: params.len(), grads: grads.len() });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient { index });
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
