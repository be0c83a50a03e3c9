use serde::{Deserialize, Serialize};

use super::tensor::DenseTensor;
use crate::error::{Error, Result};

/// Moment buffers for Adam, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[&DenseTensor]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[&DenseTensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update. `names` label parameters in error messages.
pub fn adam_step(
    params: &mut [&mut DenseTensor],
    grads: &[Vec<f64>],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape {
            context: "adam_step (parameter count)",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(Error::Shape {
                context: "adam_step (gradient length)",
                expected: p.numel(),
                actual: g.len(),
            });
        }
        if g.iter().any(|v| v.is_nan()) {
            let name = names.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for (i, x) in p.values.iter_mut().enumerate() {
            let g = grads[k][i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `base_lr · gamma^(#milestones ≤ epoch)`.
pub fn multistep_lr(epoch: usize, base_lr: f64, milestones: &[usize], gamma: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * gamma.powi(passed as i32)
}
