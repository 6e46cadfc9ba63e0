//! Small differentiable models with exact, hand-written backpropagation.
//!
//! Two architectures are provided:
//!
//! * `mlp`: dense layers `fc{i}.weight` (`[in, out]`) and `fc{i}.bias`, an
//!   activation between layers and a linear output.
//! * `attn1`: one single-head self-attention block over `seq_len` tokens of
//!   width `d_model`, with projections `q_proj`, `k_proj`, `v_proj`, `o_proj`
//!   (each `[d_model, d_model]`), an activation, mean pooling over tokens and
//!   a linear head `head.weight` / `head.bias`. Only `q_proj` and `v_proj`
//!   are tunable by default.
//!
//! Weight matrices use the row-vector convention `y = x · W`.

mod attn;
mod mlp;
mod task;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::model_store::{Snapshot, Tensor};

pub use task::{Dataset, SyntheticTask, TaskKind};
pub use train::{
    accumulate_gradients, dataset_loss, evaluate, pretrain, train_masked, OptimizerConfig,
    TrainOutcome, TrainRecord, TrainSettings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Attn1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    pub(crate) fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Architecture, activation, loss and initialization seed.
///
/// `dims` is `[input, hidden..., output]` for `mlp` and
/// `[seq_len, d_model, output]` for `attn1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelSpec {
    pub kind: ModelKind,
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    /// Substring patterns selecting tunable layers. `None` uses the
    /// architecture default (all layers for `mlp`, `q_proj`/`v_proj` for
    /// `attn1`); an empty list marks every layer tunable.
    #[serde(default)]
    pub tunable: Option<Vec<String>>,
}

impl ToyModelSpec {
    pub fn mlp(dims: Vec<usize>, activation: Activation, loss: LossKind, seed: u64) -> Self {
        Self {
            kind: ModelKind::Mlp,
            dims,
            activation,
            loss,
            seed,
            tunable: None,
        }
    }

    pub fn attn1(
        seq_len: usize,
        d_model: usize,
        outputs: usize,
        activation: Activation,
        loss: LossKind,
        seed: u64,
    ) -> Self {
        Self {
            kind: ModelKind::Attn1,
            dims: vec![seq_len, d_model, outputs],
            activation,
            loss,
            seed,
            tunable: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GemError::InvalidArgument(format!("model spec: {msg}")));
        if self.dims.contains(&0) {
            return bad("zero dimension");
        }
        match self.kind {
            ModelKind::Mlp if self.dims.len() < 2 => bad("mlp needs at least [input, output]"),
            ModelKind::Attn1 if self.dims.len() != 3 => {
                bad("attn1 needs [seq_len, d_model, output]")
            }
            _ => Ok(()),
        }?;
        if self.loss == LossKind::CrossEntropy && self.output_dim() < 2 {
            return bad("cross entropy needs at least two outputs");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => self.dims[0],
            ModelKind::Attn1 => self.dims[0] * self.dims[1],
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    /// `(name, shape, fan_in)` of every layer, in snapshot order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        match self.kind {
            ModelKind::Mlp => self
                .dims
                .windows(2)
                .enumerate()
                .flat_map(|(i, w)| {
                    [
                        (format!("fc{i}.weight"), vec![w[0], w[1]], w[0]),
                        (format!("fc{i}.bias"), vec![w[1]], 0),
                    ]
                })
                .collect(),
            ModelKind::Attn1 => {
                let d = self.dims[1];
                let out = self.dims[2];
                let mut v: Vec<_> = ["q_proj", "k_proj", "v_proj", "o_proj"]
                    .iter()
                    .map(|n| (n.to_string(), vec![d, d], d))
                    .collect();
                v.push(("head.weight".into(), vec![d, out], d));
                v.push(("head.bias".into(), vec![out], 0));
                v
            }
        }
    }

    fn default_tunable(&self) -> Vec<String> {
        match self.kind {
            ModelKind::Mlp => Vec::new(),
            ModelKind::Attn1 => vec!["q_proj".into(), "v_proj".into()],
        }
    }
}

/// Inputs (row-major, `n × input_dim`) and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `n × output_dim`.
    Values {
        values: Vec<f64>,
        dim: usize,
    },
}

impl Batch {
    pub fn len(&self) -> usize {
        if self.input_dim == 0 {
            0
        } else {
            self.inputs.len() / self.input_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let inputs = idx
            .iter()
            .flat_map(|&i| self.input(i).iter().copied())
            .collect();
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values { values, dim } => Targets::Values {
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
                dim: *dim,
            },
        };
        Batch {
            inputs,
            input_dim: self.input_dim,
            targets,
        }
    }
}

/// Deterministic initialization: weights `N(0, 1/fan_in)`, biases zero.
pub fn init_model(spec: &ToyModelSpec) -> Result<Snapshot<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    for (name, shape, fan_in) in spec.layout() {
        let n: usize = shape.iter().product();
        let values = if fan_in == 0 {
            vec![0.0; n]
        } else {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt())
                .map_err(|e| GemError::InvalidArgument(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        layers.push(Tensor::new(name, shape, values)?);
    }
    let mut snapshot = Snapshot::all_tunable(layers)?;
    let patterns = spec
        .tunable
        .clone()
        .unwrap_or_else(|| spec.default_tunable());
    snapshot.set_tunable_by_patterns(&patterns);
    Ok(snapshot)
}

fn check_model(spec: &ToyModelSpec, model: &Snapshot<f64>) -> Result<()> {
    let layout = spec.layout();
    if layout.len() != model.len() {
        return Err(GemError::InvalidArgument(format!(
            "model has {} layers, spec expects {}",
            model.len(),
            layout.len()
        )));
    }
    for ((name, shape, _), layer) in layout.iter().zip(model.layers()) {
        if *name != layer.name || *shape != layer.shape {
            return Err(GemError::ShapeMismatch {
                layer: layer.name.clone(),
                left: layer.shape.clone(),
                right: shape.clone(),
            });
        }
    }
    Ok(())
}

fn check_batch(spec: &ToyModelSpec, batch: &Batch) -> Result<()> {
    let n = batch.len();
    let mismatch = |what: &str| Err(GemError::InvalidArgument(format!("batch: {what}")));
    if batch.input_dim != spec.input_dim() || batch.inputs.len() != n * batch.input_dim {
        return mismatch("input dimension does not match the model");
    }
    if n == 0 {
        return mismatch("empty");
    }
    match (&batch.targets, spec.loss) {
        (Targets::Classes(c), LossKind::CrossEntropy) => {
            if c.len() != n || c.iter().any(|&y| y >= spec.output_dim()) {
                return mismatch("class labels out of range");
            }
        }
        (Targets::Values { values, dim }, LossKind::Mse) => {
            if *dim != spec.output_dim() || values.len() != n * dim {
                return mismatch("target dimension does not match the model");
            }
        }
        _ => return mismatch("target kind does not match the loss"),
    }
    Ok(())
}

/// Loss of one output vector and its gradient with respect to the outputs.
pub(crate) fn output_loss(
    loss: LossKind,
    out: &[f64],
    targets: &Targets,
    row: usize,
    d_out: &mut [f64],
) -> f64 {
    match (loss, targets) {
        (LossKind::CrossEntropy, Targets::Classes(c)) => {
            let y = c[row];
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = out.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            for (d, z) in d_out.iter_mut().zip(out) {
                *d = (z - lse).exp();
            }
            d_out[y] -= 1.0;
            lse - out[y]
        }
        (LossKind::Mse, Targets::Values { values, dim }) => {
            let t = &values[row * dim..(row + 1) * dim];
            let k = *dim as f64;
            let mut l = 0.0;
            for ((d, o), y) in d_out.iter_mut().zip(out).zip(t) {
                let e = o - y;
                l += e * e;
                *d = 2.0 * e / k;
            }
            l / k
        }
        _ => unreachable!("checked by check_batch"),
    }
}

/// Model outputs for every row of `batch` (row-major `n × output_dim`).
pub fn predict(spec: &ToyModelSpec, model: &Snapshot<f64>, batch: &Batch) -> Result<Vec<f64>> {
    check_model(spec, model)?;
    if batch.input_dim != spec.input_dim() {
        return Err(GemError::InvalidArgument("batch: input dimension".into()));
    }
    let params: Vec<&[f64]> = model.layers().iter().map(|l| l.values.as_slice()).collect();
    let mut out = Vec::with_capacity(batch.len() * spec.output_dim());
    for i in 0..batch.len() {
        match spec.kind {
            ModelKind::Mlp => out.extend(mlp::forward(spec, &params, batch.input(i)).output()),
            ModelKind::Attn1 => out.extend(attn::forward(spec, &params, batch.input(i)).logits),
        }
    }
    Ok(out)
}

/// Mean loss over `batch` and its exact gradient for every layer. The
/// returned gradient snapshot carries the model's tunable flags.
pub fn forward_backward(
    spec: &ToyModelSpec,
    model: &Snapshot<f64>,
    batch: &Batch,
) -> Result<(f64, Snapshot<f64>)> {
    check_model(spec, model)?;
    check_batch(spec, batch)?;
    let params: Vec<&[f64]> = model.layers().iter().map(|l| l.values.as_slice()).collect();
    let mut grads: Vec<Vec<f64>> = model.layers().iter().map(|l| vec![0.0; l.len()]).collect();
    let mut total = 0.0;
    for i in 0..batch.len() {
        total += match spec.kind {
            ModelKind::Mlp => mlp::backward(spec, &params, batch, i, &mut grads),
            ModelKind::Attn1 => attn::backward(spec, &params, batch, i, &mut grads),
        };
    }
    let n = batch.len() as f64;
    let layers = model
        .layers()
        .iter()
        .zip(grads)
        .map(|(l, g)| Tensor {
            name: l.name.clone(),
            shape: l.shape.clone(),
            values: g.into_iter().map(|v| v / n).collect(),
        })
        .collect();
    let grads = Snapshot::new(layers, model.tunable_flags().to_vec())?;
    Ok((total / n, grads))
}
