use serde::{Deserialize, Serialize};

use super::LayerMask;
use crate::error::{GemError, Result};
use crate::model_store::Tensor;
use crate::num::Real;

fn check<T: Real>(weights: &Tensor<T>, grads: &Tensor<T>, mask: &LayerMask) -> Result<()> {
    weights.ensure_same_shape(grads)?;
    let len = weights.len();
    match mask.indices.iter().find(|&&i| i as usize >= len) {
        Some(&index) => Err(GemError::IndexOutOfRange {
            layer: weights.name.clone(),
            index,
            len,
        }),
        None => Ok(()),
    }
}

/// `w[i] -= lr · g[i]` for masked-in `i`; every other entry is left untouched.
pub fn apply_masked_sgd<T: Real>(
    weights: &mut Tensor<T>,
    grads: &Tensor<T>,
    mask: &LayerMask,
    lr: T,
) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(GemError::InvalidArgument(format!("learning rate {lr}")));
    }
    check(weights, grads, mask)?;
    for &i in &mask.indices {
        let i = i as usize;
        weights.values[i] = weights.values[i] - lr * grads.values[i];
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }

    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for one layer, plus the step count used for
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamMoments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn for_tensor(t: &Tensor<T>) -> Self {
        Self::zeros(t.len())
    }
}

/// One AdamW step restricted to the mask.
///
/// The gradient is treated as zero outside the mask, so moments there never
/// move. Decoupled weight decay (`w *= 1 − lr·λ`) is applied before the Adam
/// step and only at masked-in indices.
pub fn apply_masked_adamw<T: Real>(
    state: &mut AdamMoments<T>,
    weights: &mut Tensor<T>,
    grads: &Tensor<T>,
    mask: &LayerMask,
    hyper: &AdamConfig,
) -> Result<()> {
    check(weights, grads, mask)?;
    if state.m.len() != weights.len() || state.v.len() != weights.len() {
        return Err(GemError::ShapeMismatch {
            layer: weights.name.clone(),
            left: weights.shape.clone(),
            right: vec![state.m.len()],
        });
    }
    if !(hyper.lr > 0.0) {
        return Err(GemError::InvalidArgument(format!(
            "learning rate {}",
            hyper.lr
        )));
    }
    state.step += 1;
    let lr = T::lit(hyper.lr);
    let b1 = T::lit(hyper.beta1);
    let b2 = T::lit(hyper.beta2);
    let eps = T::lit(hyper.eps);
    let decay = T::one() - lr * T::lit(hyper.weight_decay);
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let apply_decay = hyper.weight_decay != 0.0;

    for &i in &mask.indices {
        let i = i as usize;
        let g = grads.values[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let mut w = weights.values[i];
        if apply_decay {
            w = w * decay;
        }
        weights.values[i] = w - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
