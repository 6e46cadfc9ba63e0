//! Sparse fine-tuning masks driven by gradient-to-weight ratios.
//!
//! The crate scores every tunable parameter by `|grad / weight|`, splits a
//! global parameter budget across layers according to each layer's score
//! norm and score entropy, and selects the top-scoring parameters inside each
//! layer. Around that core sit a small checkpoint format, a binary mask
//! format, masked SGD/AdamW updates and a set of toy models with exact
//! backpropagation for desk-scale experiments.
//!
//! The numeric core is generic over [`Real`]; the aliases below fix the
//! scalar to `f64`, which is what the loaders, the mask builder and the toy
//! models use.

pub mod allocation;
pub mod error;
pub mod mask_engine;
pub mod model_store;
pub mod num;
pub mod scoring;
pub mod strategies;
pub mod toy_models;

pub use error::{GemError, Result};
pub use num::Real;

/// One named, shaped layer of `f64` values.
pub type LayerTensor = model_store::Tensor<f64>;
/// Weights (or any other per-layer values) of a whole model.
pub type ModelSnapshot = model_store::Snapshot<f64>;
/// Gradients at the reference weights; same layout as [`ModelSnapshot`].
pub type GradientSnapshot = model_store::Snapshot<f64>;
/// Per-parameter scores for one layer.
pub type ScoreVector = scoring::Scores<f64>;
/// Masked AdamW state for one layer.
pub type AdamState = mask_engine::AdamMoments<f64>;
