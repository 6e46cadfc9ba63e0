//! Named masking strategies, the stable vocabulary of the command line and
//! experiment configs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::allocation::{Allocator, LogBase};
use crate::error::{GemError, Result};
use crate::mask_engine::{build_masks, MaskRecipe, MaskSet, Scorer, Selection};
use crate::model_store::Snapshot;
use crate::num::Real;
use crate::scoring::DEFAULT_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    /// GWR scores, norm·entropy allocation.
    Gem,
    /// Uniform sampling inside size-proportional layer budgets.
    Random,
    /// `|g|` scores, size-proportional layer budgets.
    TopGradient,
    /// `|g|` scores, one global top-k across layers.
    TopGradientGlobal,
    GwrUniform,
    /// GWR scores, identical count per layer.
    GwrUniformEqual,
    GwrNormOnly,
    GwrEntropyOnly,
}

impl StrategyName {
    pub const ALL: [StrategyName; 8] = [
        StrategyName::Gem,
        StrategyName::Random,
        StrategyName::TopGradient,
        StrategyName::TopGradientGlobal,
        StrategyName::GwrUniform,
        StrategyName::GwrUniformEqual,
        StrategyName::GwrNormOnly,
        StrategyName::GwrEntropyOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Gem => "gem",
            StrategyName::Random => "random",
            StrategyName::TopGradient => "top_gradient",
            StrategyName::TopGradientGlobal => "top_gradient_global",
            StrategyName::GwrUniform => "gwr_uniform",
            StrategyName::GwrUniformEqual => "gwr_uniform_equal",
            StrategyName::GwrNormOnly => "gwr_norm_only",
            StrategyName::GwrEntropyOnly => "gwr_entropy_only",
        }
    }

    /// Ranks parameters by gradient-to-weight ratio.
    pub fn is_gwr_based(self) -> bool {
        matches!(
            self,
            StrategyName::Gem
                | StrategyName::GwrUniform
                | StrategyName::GwrUniformEqual
                | StrategyName::GwrNormOnly
                | StrategyName::GwrEntropyOnly
        )
    }

    pub fn recipe(self, seed: u64) -> MaskRecipe {
        let (scorer, allocator, selection) = match self {
            StrategyName::Gem => (Scorer::Gwr, Allocator::NormEntropy, Selection::TopK),
            StrategyName::Random => (Scorer::Gwr, Allocator::Uniform, Selection::Random { seed }),
            StrategyName::TopGradient => {
                (Scorer::GradMagnitude, Allocator::Uniform, Selection::TopK)
            }
            StrategyName::TopGradientGlobal => {
                (Scorer::GradMagnitude, Allocator::Global, Selection::TopK)
            }
            StrategyName::GwrUniform => (Scorer::Gwr, Allocator::Uniform, Selection::TopK),
            StrategyName::GwrUniformEqual => {
                (Scorer::Gwr, Allocator::UniformEqualCount, Selection::TopK)
            }
            StrategyName::GwrNormOnly => (Scorer::Gwr, Allocator::NormOnly, Selection::TopK),
            StrategyName::GwrEntropyOnly => (Scorer::Gwr, Allocator::EntropyOnly, Selection::TopK),
        };
        MaskRecipe {
            scorer,
            allocator,
            selection,
            log_base: LogBase::Natural,
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| GemError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategySpec {
    pub name: StrategyName,
    /// Used by `random` only.
    pub seed: u64,
    pub eps: f64,
    pub ratio: f64,
}

impl StrategySpec {
    pub fn new(name: StrategyName, ratio: f64) -> Self {
        Self {
            name,
            seed: 0,
            eps: DEFAULT_EPS,
            ratio,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Builds the mask set for `spec`; the provenance carries the strategy name.
pub fn make_mask<T: Real>(
    spec: &StrategySpec,
    w0: &Snapshot<T>,
    g0: &Snapshot<T>,
) -> Result<MaskSet> {
    if !(spec.ratio > 0.0 && spec.ratio <= 1.0) {
        return Err(GemError::RatioOutOfRange(spec.ratio));
    }
    let recipe = spec.name.recipe(spec.seed);
    let ms = build_masks(w0, g0, spec.ratio, &recipe, T::lit(spec.eps))?;
    Ok(ms.with_strategy_name(spec.name.as_str()))
}
