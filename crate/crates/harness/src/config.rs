use std::fs;
use std::path::{Path, PathBuf};

use gem_core::strategies::StrategyName;
use gem_core::toy_models::{
    Activation, LossKind, OptimizerConfig, SyntheticTask, TaskKind, ToyModelSpec,
};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
}

/// One experiment: every `(strategy, ratio, seed)` cell.
///
/// `task` describes the fine-tuning target. The source task used for
/// pre-training is the same task with `shift = 0`. Each seed overrides the
/// model and task seeds, so `model.seed` and `task.seed` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ToyModelSpec,
    pub task: SyntheticTask,
    pub strategies: Vec<StrategyName>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub pretrain: PretrainConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Batches of the target training split averaged into the gradient the
    /// masks are built from; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_batches: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    32
}

fn default_eps() -> f64 {
    gem_core::scoring::DEFAULT_EPS
}

impl ExperimentConfig {
    /// The desk-scale fine-tuning comparison: a one-block attention model
    /// with only `q_proj`/`v_proj` tunable, pre-trained on two Gaussian
    /// classes and fine-tuned after rotating the class direction by one
    /// radian.
    pub fn fig2_default() -> Self {
        Self {
            model: ToyModelSpec::attn1(4, 32, 2, Activation::Tanh, LossKind::CrossEntropy, 0),
            task: SyntheticTask::two_gaussians(128, 512, 256, 1.0, 0).with_shift(1.0),
            strategies: vec![
                StrategyName::Gem,
                StrategyName::GwrUniform,
                StrategyName::Random,
                StrategyName::TopGradient,
            ],
            ratios: vec![0.01],
            seeds: vec![1, 2, 3],
            pretrain: PretrainConfig {
                optimizer: OptimizerConfig::sgd(0.05),
                epochs: 10,
            },
            optimizer: OptimizerConfig::adamw(1e-3, 0.0),
            epochs: 10,
            batch_size: default_batch_size(),
            grad_batches: None,
            eps: default_eps(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.strategies.is_empty() || self.seeds.is_empty() || self.ratios.is_empty() {
            return bad("strategies, ratios and seeds must be non-empty".into());
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return bad(format!("strategy `{s}` listed twice"));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return bad(format!("seed {s} listed twice"));
            }
        }
        for (i, &r) in self.ratios.iter().enumerate() {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("ratio {r} outside (0, 1]"));
            }
            if self.ratios[..i].contains(&r) {
                return bad(format!("ratio {r} listed twice"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.grad_batches == Some(0) {
            return bad("grad_batches must be positive".into());
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        for (what, o) in [
            ("optimizer", &self.optimizer),
            ("pretrain.optimizer", &self.pretrain.optimizer),
        ] {
            if !(o.lr > 0.0 && o.lr.is_finite()) {
                return bad(format!("{what}: learning rate {} must be positive", o.lr));
            }
        }
        self.model.validate()?;
        self.task.validate()?;
        if self.model.input_dim() != self.task.input_dim {
            return bad(format!(
                "model takes {} inputs, task produces {}",
                self.model.input_dim(),
                self.task.input_dim
            ));
        }
        if self.model.output_dim() != self.task.outputs {
            return bad(format!(
                "model has {} outputs, task has {}",
                self.model.output_dim(),
                self.task.outputs
            ));
        }
        let expected = match self.task.kind {
            TaskKind::TwoGaussiansClassification => LossKind::CrossEntropy,
            TaskKind::TeacherStudentRegression => LossKind::Mse,
        };
        if self.model.loss != expected {
            return bad(format!(
                "loss {:?} does not fit task {:?}",
                self.model.loss, self.task.kind
            ));
        }
        Ok(())
    }

    pub(crate) fn model_for_seed(&self, seed: u64) -> ToyModelSpec {
        ToyModelSpec {
            seed,
            ..self.model.clone()
        }
    }

    pub(crate) fn tasks_for_seed(&self, seed: u64) -> (SyntheticTask, SyntheticTask) {
        let target = self.task.clone().with_seed(seed);
        let source = target.clone().with_shift(0.0);
        (source, target)
    }
}
