//! Adam optimizer and the stepwise learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::encoder::Parameters;
use crate::numgrad::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Learning rate after `epoch` (0-based): base * 0.9^(epoch / 10), one
/// decay after every 10 completed epochs.
pub fn effective_lr(base: f64, epoch: usize) -> f64 {
    base * 0.9f64.powi((epoch / 10) as i32)
}

/// One Adam update over all parameters. `grads` must follow the canonical
/// tensor order of `Parameters::tensors`.
pub fn adam_step(
    params: &mut Parameters,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let slots = params.tensors_mut();
    if grads.len() != slots.len() || state.m.len() != slots.len() {
        return Err(Error::LengthMismatch {
            left: slots.len(),
            right: grads.len(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, slot) in slots.into_iter().enumerate() {
        if grads[i].shape() != slot.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "parameter {} has shape {:?}, gradient {:?}",
                    i,
                    slot.shape(),
                    grads[i].shape()
                ),
            });
        }
        let g = grads[i].data();
        let mut m = state.m[i].data().to_vec();
        let mut v = state.v[i].data().to_vec();
        let mut p = slot.data().to_vec();
        for j in 0..p.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        let shape = slot.shape().to_vec();
        state.m[i] = Tensor::from_vec(shape.clone(), m)?;
        state.v[i] = Tensor::from_vec(shape.clone(), v)?;
        *slot = Tensor::from_vec(shape, p)?;
    }
    Ok(())
}
