use super::tensor::Tensor;
use crate::error::{Result, SencaError};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 5e-4;

    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// Applies one Adam update to `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(SencaError::Parameter(format!(
            "adam_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(SencaError::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
