use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    forward_backward, output_loss, predict, Batch, Dataset, LossKind, Targets, ToyModelSpec,
};
use crate::error::{GemError, Result};
use crate::mask_engine::{
    apply_masked_adamw, apply_masked_sgd, AdamConfig, AdamMoments, LayerMask, MaskSet,
};
use crate::model_store::Snapshot;
use crate::scoring::{
    captured_share, compute_gwr, total_loss_reduction_proxy, total_relative_weight_change,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Constant learning rate; the Adam fields are ignored by SGD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(rename = "type")]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..Self::sgd(lr)
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-run shuffle stream.
    pub shuffle_seed: u64,
    /// Denominator clamp for relative weight change and GWR.
    pub eps: f64,
}

/// Metrics at the end of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean loss over the whole training split.
    pub loss: f64,
    /// Accuracy for classification, mean squared error for regression,
    /// on the held-out split.
    pub metric: f64,
    pub rel_change: f64,
    pub loss_red_proxy: f64,
    pub captured_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Snapshot<f64>,
    pub records: Vec<TrainRecord>,
    pub initial_loss: f64,
    pub initial_metric: f64,
}

/// Mean loss over every row of `batch`.
pub fn dataset_loss(spec: &ToyModelSpec, model: &Snapshot<f64>, batch: &Batch) -> Result<f64> {
    let out = predict(spec, model, batch)?;
    let k = spec.output_dim();
    let mut scratch = vec![0.0; k];
    let total: f64 = out
        .chunks(k)
        .enumerate()
        .map(|(i, o)| output_loss(spec.loss, o, &batch.targets, i, &mut scratch))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Accuracy (cross-entropy models) or mean squared error (MSE models).
pub fn evaluate(spec: &ToyModelSpec, model: &Snapshot<f64>, batch: &Batch) -> Result<f64> {
    match (spec.loss, &batch.targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            let out = predict(spec, model, batch)?;
            let hits = out
                .chunks(spec.output_dim())
                .zip(labels)
                .filter(|(o, &y)| {
                    let best = o
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, v)| if *v > o[b] { i } else { b });
                    best == y
                })
                .count();
            Ok(hits as f64 / labels.len() as f64)
        }
        (LossKind::Mse, Targets::Values { .. }) => dataset_loss(spec, model, batch),
        _ => Err(GemError::InvalidArgument(
            "targets do not match the loss".into(),
        )),
    }
}

/// Exact mean gradient over the first `max_batches` batches of `train`
/// (all of them when `None`), taken in data order.
pub fn accumulate_gradients(
    spec: &ToyModelSpec,
    model: &Snapshot<f64>,
    train: &Batch,
    batch_size: usize,
    max_batches: Option<usize>,
) -> Result<Snapshot<f64>> {
    if batch_size == 0 {
        return Err(GemError::InvalidArgument("batch size 0".into()));
    }
    let order: Vec<usize> = (0..train.len()).collect();
    let chunks: Vec<&[usize]> = order
        .chunks(batch_size)
        .take(max_batches.unwrap_or(usize::MAX))
        .collect();
    let mut acc = model.zeros_like();
    let mut seen = 0usize;
    for chunk in chunks {
        let (_, g) = forward_backward(spec, model, &train.select(chunk))?;
        let w = chunk.len() as f64;
        for (a, l) in acc.layers_mut().iter_mut().zip(g.layers()) {
            a.values
                .iter_mut()
                .zip(&l.values)
                .for_each(|(x, y)| *x += w * y);
        }
        seen += chunk.len();
    }
    if seen == 0 {
        return Err(GemError::InvalidArgument("no training samples".into()));
    }
    for a in acc.layers_mut() {
        a.values.iter_mut().for_each(|x| *x /= seen as f64);
    }
    Ok(acc)
}

enum LayerOptimizer {
    Sgd,
    Adam(AdamMoments<f64>),
}

/// Runs `epochs` passes over `data.train`, updating only the masked
/// parameters; calls `on_epoch` with the model after each epoch.
fn run_epochs(
    spec: &ToyModelSpec,
    start: &Snapshot<f64>,
    train: &Batch,
    masks: &[LayerMask],
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(usize, &Snapshot<f64>) -> Result<()>,
) -> Result<Snapshot<f64>> {
    if settings.batch_size == 0 {
        return Err(GemError::InvalidArgument("batch size 0".into()));
    }
    if !(settings.optimizer.lr > 0.0) {
        return Err(GemError::InvalidArgument(format!(
            "learning rate {}",
            settings.optimizer.lr
        )));
    }
    let mut model = start.clone();
    let positions = masks
        .iter()
        .map(|m| {
            let pos = model.position(&m.layer_name).ok_or_else(|| {
                GemError::Pairing(format!("mask layer `{}` not in model", m.layer_name))
            })?;
            if model.layers()[pos].len() != m.param_count() {
                return Err(GemError::ShapeMismatch {
                    layer: m.layer_name.clone(),
                    left: model.layers()[pos].shape.clone(),
                    right: m.shape.clone(),
                });
            }
            Ok(pos)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut optimizers: Vec<LayerOptimizer> = positions
        .iter()
        .map(|&p| match settings.optimizer.kind {
            OptimizerKind::Sgd => LayerOptimizer::Sgd,
            OptimizerKind::Adamw => {
                LayerOptimizer::Adam(AdamMoments::for_tensor(&model.layers()[p]))
            }
        })
        .collect();
    let adam = settings.optimizer.adam();

    let mut rng = ChaCha8Rng::seed_from_u64(settings.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let (_, grads) = forward_backward(spec, &model, &train.select(chunk))?;
            for ((mask, &pos), opt) in masks.iter().zip(&positions).zip(optimizers.iter_mut()) {
                let g = &grads.layers()[pos];
                let w = &mut model.layers_mut()[pos];
                match opt {
                    LayerOptimizer::Sgd => apply_masked_sgd(w, g, mask, settings.optimizer.lr)?,
                    LayerOptimizer::Adam(state) => apply_masked_adamw(state, w, g, mask, &adam)?,
                }
            }
        }
        on_epoch(epoch, &model)?;
    }
    Ok(model)
}

/// Trains every layer of `model` (tunable flags are ignored) on `data`.
/// Stands in for pre-training before a fine-tuning experiment.
pub fn pretrain(
    spec: &ToyModelSpec,
    model: &Snapshot<f64>,
    data: &Dataset,
    settings: &TrainSettings,
) -> Result<Snapshot<f64>> {
    let masks = model
        .layers()
        .iter()
        .map(|l| LayerMask::full(l.name.clone(), l.shape.clone()))
        .collect::<Result<Vec<_>>>()?;
    run_epochs(spec, model, &data.train, &masks, settings, |_, _| Ok(()))
}

/// Fine-tunes the masked parameters of `w0`, recording per-epoch metrics.
///
/// `grad0` is the gradient at `w0` that the masks were built from; it feeds
/// the loss-reduction proxy and the captured GWR share.
pub fn train_masked(
    spec: &ToyModelSpec,
    w0: &Snapshot<f64>,
    data: &Dataset,
    masks: &MaskSet,
    grad0: &Snapshot<f64>,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    let eps = settings.eps;
    let scores = masks
        .masks
        .iter()
        .map(|m| {
            let w = w0.get(&m.layer_name).ok_or_else(|| {
                GemError::Pairing(format!("mask layer `{}` not in model", m.layer_name))
            })?;
            let g = grad0
                .get(&m.layer_name)
                .ok_or_else(|| GemError::Pairing(format!("no gradient for `{}`", m.layer_name)))?;
            compute_gwr(w, g, eps)
        })
        .collect::<Result<Vec<_>>>()?;
    let share = captured_share(&scores, &masks.masks)?;

    let initial_loss = dataset_loss(spec, w0, &data.train)?;
    let initial_metric = evaluate(spec, w0, &data.eval)?;
    let mut records = Vec::with_capacity(settings.epochs);
    let model = run_epochs(spec, w0, &data.train, &masks.masks, settings, |epoch, m| {
        records.push(TrainRecord {
            epoch,
            loss: dataset_loss(spec, m, &data.train)?,
            metric: evaluate(spec, m, &data.eval)?,
            rel_change: total_relative_weight_change(w0, m, &masks.masks, eps)?,
            loss_red_proxy: total_loss_reduction_proxy(grad0, w0, m, &masks.masks)?,
            captured_share: share,
        });
        Ok(())
    })?;
    Ok(TrainOutcome {
        model,
        records,
        initial_loss,
        initial_metric,
    })
}
