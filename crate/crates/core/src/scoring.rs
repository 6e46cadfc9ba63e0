//! Per-parameter scores and the diagnostics used to compare masks.
//!
//! The gradient-to-weight ratio of a parameter is `|g| / max(|w|, eps)`: the
//! relative size of a plain gradient step on that parameter, per unit of
//! learning rate.

use crate::error::{GemError, Result};
use crate::mask_engine::LayerMask;
use crate::model_store::{Snapshot, Tensor};
use crate::num::{stable_sum, CompensatedSum, Real};

pub const DEFAULT_EPS: f64 = 1e-12;

/// Nonnegative scores parallel to one layer's flat index space.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores<T> {
    pub layer_name: String,
    pub scores: Vec<T>,
}

impl<T: Real> Scores<T> {
    /// Validates that every score is finite and nonnegative.
    pub fn new(layer_name: impl Into<String>, scores: Vec<T>) -> Result<Self> {
        let s = Self {
            layer_name: layer_name.into(),
            scores,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(index) = self
            .scores
            .iter()
            .position(|v| !v.is_finite() || *v < T::zero())
        {
            return Err(GemError::InvalidScore {
                layer: self.layer_name.clone(),
                index,
                value: self.scores[index].as_f64(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn total(&self) -> T {
        stable_sum(self.scores.iter().copied())
    }
}

fn check_eps<T: Real>(eps: T) -> Result<()> {
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(GemError::InvalidArgument(format!(
            "eps must be positive and finite, got {eps}"
        )));
    }
    Ok(())
}

/// Gradient-to-weight ratio `|g[i]| / max(|w[i]|, eps)`.
pub fn compute_gwr<T: Real>(weights: &Tensor<T>, grads: &Tensor<T>, eps: T) -> Result<Scores<T>> {
    check_eps(eps)?;
    weights.ensure_same_shape(grads)?;
    let scores = weights
        .values
        .iter()
        .zip(&grads.values)
        .map(|(w, g)| g.abs() / w.abs().max(eps))
        .collect();
    Scores::new(weights.name.clone(), scores)
}

/// Plain gradient magnitude `|g[i]|`, the score behind top-gradient masking.
pub fn compute_grad_magnitude<T: Real>(grads: &Tensor<T>) -> Result<Scores<T>> {
    Scores::new(
        grads.name.clone(),
        grads.values.iter().map(|g| g.abs()).collect(),
    )
}

fn check_mask(mask: &LayerMask, len: usize, name: &str) -> Result<()> {
    match mask.indices.iter().find(|&&i| i as usize >= len) {
        Some(&index) => Err(GemError::IndexOutOfRange {
            layer: name.to_string(),
            index,
            len,
        }),
        None => Ok(()),
    }
}

/// Squared relative change summed over the selected indices, compensated.
fn relative_change_sq<T: Real>(
    w0: &Tensor<T>,
    wt: &Tensor<T>,
    selected: &LayerMask,
    eps: T,
) -> Result<T> {
    check_eps(eps)?;
    w0.ensure_same_shape(wt)?;
    check_mask(selected, w0.len(), &w0.name)?;
    Ok(stable_sum(selected.indices.iter().map(|&i| {
        let i = i as usize;
        let rel = (wt.values[i] - w0.values[i]) / w0.values[i].abs().max(eps);
        rel * rel
    })))
}

/// L2 norm over the selected indices of `(wt - w0) / max(|w0|, eps)`.
pub fn relative_weight_change<T: Real>(
    w0: &Tensor<T>,
    wt: &Tensor<T>,
    selected: &LayerMask,
    eps: T,
) -> Result<T> {
    relative_change_sq(w0, wt, selected, eps).map(T::sqrt)
}

fn signed_loss_change<T: Real>(
    grad0: &Tensor<T>,
    w0: &Tensor<T>,
    wt: &Tensor<T>,
    selected: &LayerMask,
) -> Result<T> {
    w0.ensure_same_shape(wt)?;
    w0.ensure_same_shape(grad0)?;
    check_mask(selected, w0.len(), &w0.name)?;
    Ok(stable_sum(selected.indices.iter().map(|&i| {
        let i = i as usize;
        grad0.values[i] * (wt.values[i] - w0.values[i])
    })))
}

/// First-order loss change magnitude `|Σ_{i∈selected} g0[i]·(wt[i] − w0[i])|`.
pub fn loss_reduction_proxy<T: Real>(
    grad0: &Tensor<T>,
    w0: &Tensor<T>,
    wt: &Tensor<T>,
    selected: &LayerMask,
) -> Result<T> {
    signed_loss_change(grad0, w0, wt, selected).map(T::abs)
}

/// Fraction of the total score mass covered by the masks. Zero when the
/// total mass is zero. Layers are matched positionally.
pub fn captured_share<T: Real>(scores: &[Scores<T>], masks: &[LayerMask]) -> Result<T> {
    if scores.len() != masks.len() {
        return Err(GemError::InvalidArgument(format!(
            "{} score vectors but {} masks",
            scores.len(),
            masks.len()
        )));
    }
    let mut captured = CompensatedSum::new();
    let mut total = CompensatedSum::new();
    for (s, m) in scores.iter().zip(masks) {
        check_mask(m, s.len(), &s.layer_name)?;
        for &i in &m.indices {
            captured.add(s.scores[i as usize]);
        }
        for &v in &s.scores {
            total.add(v);
        }
    }
    let total = total.value();
    if total == T::zero() {
        return Ok(T::zero());
    }
    Ok(captured.value() / total)
}

fn masked_pairs<'a, T: Real>(
    w0: &'a Snapshot<T>,
    wt: &'a Snapshot<T>,
    masks: &'a [LayerMask],
) -> Result<Vec<(&'a Tensor<T>, &'a Tensor<T>, &'a LayerMask)>> {
    masks
        .iter()
        .map(|m| {
            let a = w0
                .get(&m.layer_name)
                .ok_or_else(|| GemError::Pairing(format!("no layer `{}`", m.layer_name)))?;
            let b = wt
                .get(&m.layer_name)
                .ok_or_else(|| GemError::Pairing(format!("no layer `{}`", m.layer_name)))?;
            Ok((a, b, m))
        })
        .collect()
}

/// Relative weight change over every masked layer, as one L2 norm.
pub fn total_relative_weight_change<T: Real>(
    w0: &Snapshot<T>,
    wt: &Snapshot<T>,
    masks: &[LayerMask],
    eps: T,
) -> Result<T> {
    let mut acc = CompensatedSum::new();
    for (a, b, m) in masked_pairs(w0, wt, masks)? {
        acc.add(relative_change_sq(a, b, m, eps)?);
    }
    Ok(acc.value().sqrt())
}

/// Loss-reduction proxy over every masked layer: the per-layer signed dot
/// products are summed in mask order before taking the magnitude.
pub fn total_loss_reduction_proxy<T: Real>(
    grad0: &Snapshot<T>,
    w0: &Snapshot<T>,
    wt: &Snapshot<T>,
    masks: &[LayerMask],
) -> Result<T> {
    let mut acc = CompensatedSum::new();
    for (a, b, m) in masked_pairs(w0, wt, masks)? {
        let g = grad0
            .get(&m.layer_name)
            .ok_or_else(|| GemError::Pairing(format!("no gradient for `{}`", m.layer_name)))?;
        acc.add(signed_loss_change(g, a, b, m)?);
    }
    Ok(acc.value().abs())
}
