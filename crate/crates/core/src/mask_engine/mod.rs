//! Mask construction, masked parameter updates and the mask file format.

mod format;
mod optim;

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{plan_allocation_in, AllocationPlan, Allocator, LogBase};
use crate::error::{GemError, Result};
use crate::model_store::{pair_tunable, Snapshot};
use crate::num::Real;
use crate::scoring::{compute_grad_magnitude, compute_gwr, Scores};

pub use format::{
    load_masks, mask_set_from_bytes, mask_set_to_bytes, save_masks, MASK_MAGIC, MASK_VERSION,
};
pub use optim::{apply_masked_adamw, apply_masked_sgd, AdamConfig, AdamMoments};

/// Selected flat indices of one layer, strictly ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub layer_name: String,
    pub shape: Vec<usize>,
    pub indices: Vec<u64>,
}

impl LayerMask {
    pub fn new(
        layer_name: impl Into<String>,
        shape: Vec<usize>,
        indices: Vec<u64>,
    ) -> Result<Self> {
        let mask = Self {
            layer_name: layer_name.into(),
            shape,
            indices,
        };
        mask.validate()?;
        Ok(mask)
    }

    /// Every index of a layer with the given shape.
    pub fn full(layer_name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(layer_name, shape, (0..n as u64).collect())
    }

    pub fn param_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(GemError::InvalidShape {
                layer: self.layer_name.clone(),
                shape: self.shape.clone(),
            });
        }
        if let Some(w) = self.indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(GemError::MaskFormat(format!(
                "layer `{}`: indices not strictly ascending ({} then {})",
                self.layer_name, w[0], w[1]
            )));
        }
        let len = self.param_count();
        if let Some(&last) = self.indices.last() {
            if last as usize >= len {
                return Err(GemError::IndexOutOfRange {
                    layer: self.layer_name.clone(),
                    index: last,
                    len,
                });
            }
        }
        Ok(())
    }

    /// Dense 0/1 view.
    pub fn to_dense(&self) -> Vec<bool> {
        let mut dense = vec![false; self.param_count()];
        for &i in &self.indices {
            dense[i as usize] = true;
        }
        dense
    }
}

/// Where a mask set came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub strategy: String,
    pub ratio: f64,
    pub eps: f64,
    pub seed: Option<u64>,
    pub gradient_source: String,
    pub plan: AllocationPlan,
}

/// One mask per tunable layer, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<LayerMask>,
    pub provenance: Provenance,
}

impl MaskSet {
    pub fn selected_count(&self) -> usize {
        self.masks.iter().map(LayerMask::len).sum()
    }

    pub fn get(&self, layer_name: &str) -> Option<&LayerMask> {
        self.masks.iter().find(|m| m.layer_name == layer_name)
    }

    /// Checks every mask and that the selected total matches the plan.
    pub fn validate(&self) -> Result<()> {
        for m in &self.masks {
            m.validate()?;
        }
        let plan = &self.provenance.plan;
        if self.selected_count() != plan.total_budget {
            return Err(GemError::MaskFormat(format!(
                "{} selected indices but plan budget is {}",
                self.selected_count(),
                plan.total_budget
            )));
        }
        if plan.layers.len() == self.masks.len() {
            for (m, l) in self.masks.iter().zip(&plan.layers) {
                if m.layer_name != l.layer_name || m.len() != l.budget {
                    return Err(GemError::MaskFormat(format!(
                        "layer `{}` holds {} indices, plan assigns {} to `{}`",
                        m.layer_name,
                        m.len(),
                        l.budget,
                        l.layer_name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_strategy_name(mut self, name: impl Into<String>) -> Self {
        self.provenance.strategy = name.into();
        self
    }

    pub fn with_gradient_source(mut self, source: impl Into<String>) -> Self {
        self.provenance.gradient_source = source.into();
        self
    }
}

/// Orders `(score, index)` by descending score, then ascending index.
fn rank_order<T: Real>(scores: &[T]) -> impl Fn(&u64, &u64) -> Ordering + '_ {
    move |&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// The `k` largest scores; ties go to the lower flat index. The returned
/// mask has a flat shape `[len]` and ascending indices.
pub fn select_top_k<T: Real>(scores: &Scores<T>, k: usize) -> Result<LayerMask> {
    let indices = top_k_indices(&scores.scores, k)?;
    LayerMask::new(
        scores.layer_name.clone(),
        vec![scores.len().max(1)],
        indices,
    )
}

pub fn top_k_indices<T: Real>(scores: &[T], k: usize) -> Result<Vec<u64>> {
    if k > scores.len() {
        return Err(GemError::KOutOfRange {
            k,
            len: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(GemError::InvalidArgument(format!("score {i} is NaN")));
    }
    let mut idx: Vec<u64> = (0..scores.len() as u64).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, rank_order(scores));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Which per-parameter score drives selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// `|g| / max(|w|, eps)`
    Gwr,
    /// `|g|`
    GradMagnitude,
}

/// How indices are picked once each layer has a budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    TopK,
    /// Uniform sampling without replacement; one ChaCha8 stream seeded with
    /// `seed`, consumed layer by layer in order.
    Random {
        seed: u64,
    },
}

/// Scorer, allocator and selection rule for [`build_masks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRecipe {
    pub scorer: Scorer,
    pub allocator: Allocator,
    pub selection: Selection,
    pub log_base: LogBase,
}

impl MaskRecipe {
    /// Full GWR + norm·entropy + top-k pipeline.
    pub const GEM: MaskRecipe = MaskRecipe {
        scorer: Scorer::Gwr,
        allocator: Allocator::NormEntropy,
        selection: Selection::TopK,
        log_base: LogBase::Natural,
    };

    pub fn describe(&self) -> String {
        let scorer = match self.scorer {
            Scorer::Gwr => "gwr",
            Scorer::GradMagnitude => "grad",
        };
        let select = match self.selection {
            Selection::TopK => "top_k".to_string(),
            Selection::Random { .. } => "random".to_string(),
        };
        format!("{scorer}+{}+{select}", self.allocator.name())
    }
}

/// Per-layer scores of the tunable layers under `scorer`.
pub fn score_layers<T: Real>(
    weights: &Snapshot<T>,
    grads: &Snapshot<T>,
    scorer: Scorer,
    eps: T,
) -> Result<Vec<Scores<T>>> {
    pair_tunable(weights, grads)?
        .into_iter()
        .map(|(w, g)| match scorer {
            Scorer::Gwr => compute_gwr(w, g, eps),
            Scorer::GradMagnitude => compute_grad_magnitude(g),
        })
        .collect()
}

/// Scores every tunable layer, splits `floor(r·N)` across layers and selects
/// parameters inside each layer. Deterministic for fixed inputs.
pub fn build_masks<T: Real>(
    weights: &Snapshot<T>,
    grads: &Snapshot<T>,
    ratio: f64,
    recipe: &MaskRecipe,
    eps: T,
) -> Result<MaskSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(GemError::RatioOutOfRange(ratio));
    }
    let scores = score_layers(weights, grads, recipe.scorer, eps)?;
    if scores.is_empty() {
        return Err(GemError::NoTunableLayers);
    }
    let plan = plan_allocation_in(&scores, recipe.allocator, ratio, recipe.log_base)?;
    let shapes: Vec<&Vec<usize>> = weights.tunable_layers().map(|l| &l.shape).collect();

    let masks = match recipe.selection {
        Selection::TopK => scores
            .iter()
            .zip(&plan.layers)
            .zip(&shapes)
            .map(|((s, l), shape)| {
                LayerMask::new(
                    s.layer_name.clone(),
                    (*shape).clone(),
                    top_k_indices(&s.scores, l.budget)?,
                )
            })
            .collect::<Result<Vec<_>>>()?,
        Selection::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            scores
                .iter()
                .zip(&plan.layers)
                .zip(&shapes)
                .map(|((s, l), shape)| {
                    let mut idx: Vec<u64> = rand::seq::index::sample(&mut rng, s.len(), l.budget)
                        .into_iter()
                        .map(|i| i as u64)
                        .collect();
                    idx.sort_unstable();
                    LayerMask::new(s.layer_name.clone(), (*shape).clone(), idx)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let seed = match recipe.selection {
        Selection::Random { seed } => Some(seed),
        Selection::TopK => None,
    };
    let set = MaskSet {
        masks,
        provenance: Provenance {
            strategy: recipe.describe(),
            ratio,
            eps: eps.as_f64(),
            seed,
            gradient_source: "unspecified".into(),
            plan,
        },
    };
    set.validate()?;
    Ok(set)
}
