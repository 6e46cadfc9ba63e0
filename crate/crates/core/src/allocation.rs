//! Layer-wise budget allocation.
//!
//! Each layer's scores are normalized into a distribution whose entropy
//! measures how spread out the signal is. A layer's importance is the L2 norm
//! of its scores times that entropy; the global budget `floor(r·N)` is then
//! split in proportion to importance, with integer rounding settled by the
//! largest-remainder method (ties go to the lower layer index) and per-layer
//! caps enforced by redistributing any overflow to uncapped layers.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::num::{l2_norm, stable_sum, CompensatedSum, Real};
use crate::scoring::Scores;

/// Tolerance on `Σ p == 1` accepted by [`layer_entropy`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<T> {
    pub probs: Vec<T>,
    /// Set when every score was zero and the uniform distribution was
    /// substituted.
    pub degenerate: bool,
}

/// `p[i] = ρ[i] / Σρ`, or uniform when the scores sum to zero.
pub fn normalize_scores<T: Real>(scores: &Scores<T>) -> Result<Distribution<T>> {
    scores.validate()?;
    if scores.is_empty() {
        return Err(GemError::InvalidDistribution(format!(
            "layer `{}` has no scores",
            scores.layer_name
        )));
    }
    let total = scores.total();
    if total == T::zero() {
        let u = T::one() / T::from_count(scores.len());
        return Ok(Distribution {
            probs: vec![u; scores.len()],
            degenerate: true,
        });
    }
    Ok(Distribution {
        probs: scores.scores.iter().map(|&s| s / total).collect(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    fn ln_of_base<T: Real>(self) -> T {
        match self {
            LogBase::Natural => T::one(),
            LogBase::Two => T::lit(std::f64::consts::LN_2),
        }
    }
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn layer_entropy<T: Real>(p: &[T]) -> Result<T> {
    layer_entropy_in(p, LogBase::Natural)
}

pub fn layer_entropy_in<T: Real>(p: &[T], base: LogBase) -> Result<T> {
    if p.is_empty() {
        return Err(GemError::InvalidDistribution("empty".into()));
    }
    if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < T::zero()) {
        return Err(GemError::InvalidDistribution(format!(
            "entry {i} is {}",
            p[i]
        )));
    }
    let total = stable_sum(p.iter().copied());
    if (total - T::one()).abs() > T::lit(DISTRIBUTION_TOLERANCE) {
        return Err(GemError::InvalidDistribution(format!("sums to {total}")));
    }
    let mut acc = CompensatedSum::new();
    for &pi in p {
        if pi > T::zero() {
            acc.add(-pi * pi.ln());
        }
    }
    Ok(acc.value().max(T::zero()) / base.ln_of_base::<T>())
}

/// Entropy of `ρ / Σρ` in nats for scores with a positive sum. The largest
/// entry's log is taken as `ln_1p(-rest / Σρ)`, which keeps near-delta layers
/// accurate to a few ulps relative.
fn score_entropy<T: Real>(scores: &[T]) -> T {
    let total = stable_sum(scores.iter().copied());
    let top = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    let rest = stable_sum(
        scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, &s)| s),
    );
    let mut acc = CompensatedSum::new();
    for (i, &s) in scores.iter().enumerate() {
        if s > T::zero() {
            let p = s / total;
            let lp = if i == top {
                (-rest / total).ln_1p()
            } else {
                p.ln()
            };
            acc.add(-p * lp);
        }
    }
    acc.value().max(T::zero())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats<T> {
    /// `‖ρ‖₂`
    pub norm: T,
    pub entropy: T,
    /// `norm · entropy`
    pub importance: T,
    pub degenerate: bool,
}

/// Norm, entropy and their product for one layer's scores.
pub fn layer_importance<T: Real>(scores: &Scores<T>) -> Result<LayerStats<T>> {
    layer_importance_in(scores, LogBase::Natural)
}

pub fn layer_importance_in<T: Real>(scores: &Scores<T>, base: LogBase) -> Result<LayerStats<T>> {
    let dist = normalize_scores(scores)?;
    let entropy = if dist.degenerate {
        layer_entropy_in(&dist.probs, base)?
    } else {
        score_entropy(&scores.scores) / base.ln_of_base::<T>()
    };
    let norm = l2_norm(scores.scores.iter().copied());
    Ok(LayerStats {
        norm,
        entropy,
        importance: norm * entropy,
        degenerate: dist.degenerate,
    })
}

/// Validates `r ∈ (0, 1]` and returns `B = floor(r·N)`.
///
/// `r·N` within 1e-9 (relative) of an integer is snapped to it first, so
/// that ratios such as `8/300` with `N = 300` give exactly 8.
pub fn total_budget(ratio: f64, total_params: usize) -> Result<usize> {
    Ok(budget_quota(ratio, total_params)?.floor() as usize)
}

/// Snapped `r·N` as a real number.
pub fn budget_quota(ratio: f64, total_params: usize) -> Result<f64> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(GemError::RatioOutOfRange(ratio));
    }
    let raw = ratio * total_params as f64;
    let nearest = raw.round();
    let q = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
        nearest
    } else {
        raw
    };
    Ok(q.min(total_params as f64))
}

/// Result of splitting a budget across layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Apportionment<T> {
    /// `γ_ℓ`, the share each layer's weight claims before rounding and caps.
    pub shares: Vec<T>,
    pub budgets: Vec<usize>,
    /// All weights were zero with a positive budget; sizes were used instead.
    pub fallback_uniform: bool,
}

/// Splits `floor(r·N)` across layers in proportion to `importances`.
///
/// Quotas are `r·N·γ_ℓ` with `γ_ℓ = α_ℓ / Σα`; floors are topped up by
/// largest remainder, then any layer over its size is capped and its overflow
/// handed to the uncapped layers the same way until nothing overflows.
pub fn allocate_budget<T: Real>(
    importances: &[T],
    layer_sizes: &[usize],
    ratio: f64,
    total_params: usize,
) -> Result<Apportionment<T>> {
    if importances.len() != layer_sizes.len() {
        return Err(GemError::InvalidArgument(format!(
            "{} importances for {} layers",
            importances.len(),
            layer_sizes.len()
        )));
    }
    let n: usize = layer_sizes.iter().sum();
    if n != total_params {
        return Err(GemError::InvalidArgument(format!(
            "layer sizes sum to {n}, expected N = {total_params}"
        )));
    }
    if let Some(i) = importances
        .iter()
        .position(|a| !a.is_finite() || *a < T::zero())
    {
        return Err(GemError::InvalidArgument(format!(
            "importance {i} is {}",
            importances[i]
        )));
    }
    let quota = budget_quota(ratio, total_params)?;
    let budget = quota.floor() as usize;
    if budget > total_params {
        return Err(GemError::BudgetTooLarge {
            budget,
            total: total_params,
        });
    }
    apportion_weighted(importances, layer_sizes, T::lit(quota), budget)
}

/// Generic proportional split: quotas are `quota_total · w_ℓ / Σw`, rounded to
/// exactly `budget` and capped at `layer_sizes`.
pub fn apportion_weighted<T: Real>(
    weights: &[T],
    layer_sizes: &[usize],
    quota_total: T,
    budget: usize,
) -> Result<Apportionment<T>> {
    let capacity: usize = layer_sizes.iter().sum();
    if budget > capacity {
        return Err(GemError::BudgetTooLarge {
            budget,
            total: capacity,
        });
    }
    let wsum = stable_sum(weights.iter().copied());
    let mut fallback_uniform = false;
    let shares: Vec<T> = if wsum > T::zero() {
        weights.iter().map(|&w| w / wsum).collect()
    } else {
        vec![T::zero(); weights.len()]
    };

    if budget == 0 {
        return Ok(Apportionment {
            shares,
            budgets: vec![0; weights.len()],
            fallback_uniform,
        });
    }

    let effective: Vec<T> = if wsum > T::zero() {
        shares.clone()
    } else {
        fallback_uniform = true;
        let total = T::from_count(capacity);
        layer_sizes
            .iter()
            .map(|&s| T::from_count(s) / total)
            .collect()
    };

    let quotas: Vec<T> = effective.iter().map(|&g| quota_total * g).collect();
    let mut budgets = round_to_target(&quotas, budget);
    enforce_caps(&mut budgets, &effective, layer_sizes);
    Ok(Apportionment {
        shares,
        budgets,
        fallback_uniform,
    })
}

fn frac<T: Real>(q: T) -> T {
    q - q.floor()
}

/// Floors of `quotas`, adjusted by largest remainder to sum to `target`.
fn round_to_target<T: Real>(quotas: &[T], target: usize) -> Vec<usize> {
    let mut k: Vec<usize> = quotas
        .iter()
        .map(|q| q.max(T::zero()).floor().to_usize().unwrap_or(0))
        .collect();
    let assigned: usize = k.iter().sum();
    if quotas.is_empty() {
        return k;
    }
    match assigned.cmp(&target) {
        Ordering::Less => {
            let mut order: Vec<usize> = (0..quotas.len()).collect();
            order.sort_by(|&a, &b| {
                frac(quotas[b])
                    .partial_cmp(&frac(quotas[a]))
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for i in order.iter().cycle().take(target - assigned) {
                k[*i] += 1;
            }
        }
        Ordering::Greater => {
            // only reachable through rounding in the quotas themselves
            let mut order: Vec<usize> = (0..quotas.len()).collect();
            order.sort_by(|&a, &b| {
                frac(quotas[a])
                    .partial_cmp(&frac(quotas[b]))
                    .unwrap_or(Ordering::Equal)
                    .then(b.cmp(&a))
            });
            let mut excess = assigned - target;
            while excess > 0 {
                for &i in &order {
                    if excess > 0 && k[i] > 0 {
                        k[i] -= 1;
                        excess -= 1;
                    }
                }
            }
        }
        Ordering::Equal => {}
    }
    k
}

fn enforce_caps<T: Real>(budgets: &mut [usize], shares: &[T], caps: &[usize]) {
    loop {
        let mut overflow = 0;
        for (k, &cap) in budgets.iter_mut().zip(caps) {
            if *k > cap {
                overflow += *k - cap;
                *k = cap;
            }
        }
        if overflow == 0 {
            return;
        }
        let open: Vec<usize> = (0..budgets.len())
            .filter(|&i| budgets[i] < caps[i])
            .collect();
        if open.is_empty() {
            return;
        }
        let open_share = stable_sum(open.iter().map(|&i| shares[i]));
        let weights: Vec<T> = if open_share > T::zero() {
            open.iter().map(|&i| shares[i] / open_share).collect()
        } else {
            let room: usize = open.iter().map(|&i| caps[i] - budgets[i]).sum();
            open.iter()
                .map(|&i| T::from_count(caps[i] - budgets[i]) / T::from_count(room))
                .collect()
        };
        let quotas: Vec<T> = weights
            .iter()
            .map(|&w| T::from_count(overflow) * w)
            .collect();
        let extra = round_to_target(&quotas, overflow);
        for (&i, e) in open.iter().zip(extra) {
            budgets[i] += e;
        }
    }
}

/// How a plan turns per-layer statistics into budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocator {
    /// Importance `‖ρ‖₂ · H(p)`.
    NormEntropy,
    /// Importance `‖ρ‖₂`.
    NormOnly,
    /// Importance `H(p)`.
    EntropyOnly,
    /// Budget proportional to layer size.
    Uniform,
    /// Same count for every layer (size caps still apply).
    UniformEqualCount,
    /// No per-layer split: the top `B` scores across all layers.
    Global,
}

impl Allocator {
    pub fn name(self) -> &'static str {
        match self {
            Allocator::NormEntropy => "norm_entropy",
            Allocator::NormOnly => "norm_only",
            Allocator::EntropyOnly => "entropy_only",
            Allocator::Uniform => "uniform",
            Allocator::UniformEqualCount => "uniform_equal_count",
            Allocator::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerAllocation {
    pub layer_name: String,
    pub param_count: usize,
    pub norm: f64,
    pub entropy: f64,
    pub importance: f64,
    pub share: f64,
    pub budget: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationPlan {
    pub allocator: Allocator,
    pub log_base: LogBase,
    pub ratio: f64,
    pub total_params: usize,
    pub total_budget: usize,
    pub fallback_uniform: bool,
    pub layers: Vec<LayerAllocation>,
}

impl AllocationPlan {
    pub fn budgets(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.budget).collect()
    }
}

/// Builds the plan for `scores` (one entry per tunable layer, in order).
pub fn plan_allocation<T: Real>(
    scores: &[Scores<T>],
    allocator: Allocator,
    ratio: f64,
) -> Result<AllocationPlan> {
    plan_allocation_in(scores, allocator, ratio, LogBase::Natural)
}

pub fn plan_allocation_in<T: Real>(
    scores: &[Scores<T>],
    allocator: Allocator,
    ratio: f64,
    base: LogBase,
) -> Result<AllocationPlan> {
    let sizes: Vec<usize> = scores.iter().map(Scores::len).collect();
    let total_params: usize = sizes.iter().sum();
    let stats = scores
        .iter()
        .map(|s| layer_importance_in(s, base))
        .collect::<Result<Vec<_>>>()?;
    let quota = budget_quota(ratio, total_params)?;
    let budget = quota.floor() as usize;
    if total_params == 0 && budget == 0 && scores.is_empty() {
        return Ok(AllocationPlan {
            allocator,
            log_base: base,
            ratio,
            total_params,
            total_budget: 0,
            fallback_uniform: false,
            layers: Vec::new(),
        });
    }

    let (weights, apportionment): (Vec<T>, Apportionment<T>) = match allocator {
        Allocator::NormEntropy | Allocator::NormOnly | Allocator::EntropyOnly => {
            let w: Vec<T> = stats
                .iter()
                .map(|s| match allocator {
                    Allocator::NormEntropy => s.importance,
                    Allocator::NormOnly => s.norm,
                    _ => s.entropy,
                })
                .collect();
            let a = allocate_budget(&w, &sizes, ratio, total_params)?;
            (w, a)
        }
        Allocator::Uniform => {
            let w: Vec<T> = sizes.iter().map(|&s| T::from_count(s)).collect();
            let a = apportion_weighted(&w, &sizes, T::from_count(budget), budget)?;
            (w, a)
        }
        Allocator::UniformEqualCount => {
            let w = vec![T::one(); sizes.len()];
            let a = apportion_weighted(&w, &sizes, T::from_count(budget), budget)?;
            (w, a)
        }
        Allocator::Global => {
            let budgets = global_top_counts(scores, budget);
            let total = T::from_count(budget.max(1));
            let shares: Vec<T> = budgets.iter().map(|&k| T::from_count(k) / total).collect();
            (
                shares.clone(),
                Apportionment {
                    shares,
                    budgets,
                    fallback_uniform: false,
                },
            )
        }
    };

    let layers = scores
        .iter()
        .zip(&stats)
        .zip(weights.iter().zip(&apportionment.shares))
        .zip(&apportionment.budgets)
        .map(|(((s, st), (w, g)), &k)| LayerAllocation {
            layer_name: s.layer_name.clone(),
            param_count: s.len(),
            norm: st.norm.as_f64(),
            entropy: st.entropy.as_f64(),
            importance: w.as_f64(),
            share: g.as_f64(),
            budget: k,
            degenerate: st.degenerate,
        })
        .collect();
    Ok(AllocationPlan {
        allocator,
        log_base: base,
        ratio,
        total_params,
        total_budget: budget,
        fallback_uniform: apportionment.fallback_uniform,
        layers,
    })
}

/// Per-layer counts of the `budget` highest scores across all layers; ties
/// go to the earlier layer, then the lower flat index.
fn global_top_counts<T: Real>(scores: &[Scores<T>], budget: usize) -> Vec<usize> {
    let mut all: Vec<(T, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(l, s)| s.scores.iter().enumerate().map(move |(i, &v)| (v, l, i)))
        .collect();
    let cmp = |a: &(T, usize, usize), b: &(T, usize, usize)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    };
    let mut counts = vec![0; scores.len()];
    if budget == 0 {
        return counts;
    }
    if budget < all.len() {
        all.select_nth_unstable_by(budget - 1, cmp);
    }
    for &(_, l, _) in all.iter().take(budget) {
        counts[l] += 1;
    }
    counts
}
