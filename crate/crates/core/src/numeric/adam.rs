use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Result, SeldError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// First/second moment accumulators for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Float = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Float> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` from `param.grad`.
pub fn adam_step<T: Float>(param: &mut Tensor<T>, state: &mut AdamState<T>) -> Result<()> {
    let grad = param
        .grad
        .take()
        .ok_or_else(|| SeldError::Usage("adam_step on a parameter without gradient".into()))?;
    if grad.len() != param.numel() || state.m.len() != param.numel() {
        return Err(SeldError::dim("adam_step", param.shape(), &[state.m.len()]));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let data = param.data_mut();
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    param.grad = Some(grad);
    Ok(())
}
