use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Batch, Targets};
use crate::error::{GemError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Two isotropic Gaussian classes at `±separation/2` along a direction.
    TwoGaussiansClassification,
    /// Targets from a fixed random one-hidden-layer tanh teacher.
    TeacherStudentRegression,
}

/// A synthetic task, regenerable exactly from its fields.
///
/// `seed` fixes the task structure (class direction or teacher weights) and
/// the samples. `shift` perturbs the structure: the class direction is
/// rotated by `shift` radians, or the teacher weights get `shift` times a
/// fixed random perturbation. The structure perturbation is drawn from the
/// same seed, so a task and its shifted variant share everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub input_dim: usize,
    /// Classes for classification, target width for regression.
    pub outputs: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise: f64,
    #[serde(default = "SyntheticTask::default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Train and held-out samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub eval: Batch,
}

const STRUCTURE_STREAM: u64 = 0x5eed_0001;
const SAMPLE_STREAM: u64 = 0x5eed_0002;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl SyntheticTask {
    fn default_separation() -> f64 {
        2.0
    }

    pub fn two_gaussians(
        input_dim: usize,
        n_train: usize,
        n_eval: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        Self {
            kind: TaskKind::TwoGaussiansClassification,
            input_dim,
            outputs: 2,
            n_train,
            n_eval,
            noise,
            separation: Self::default_separation(),
            shift: 0.0,
            seed,
        }
    }

    pub fn teacher_student(
        input_dim: usize,
        outputs: usize,
        n_train: usize,
        n_eval: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        Self {
            kind: TaskKind::TeacherStudentRegression,
            input_dim,
            outputs,
            n_train,
            n_eval,
            noise,
            separation: Self::default_separation(),
            shift: 0.0,
            seed,
        }
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GemError::InvalidArgument(format!("task: {m}")));
        if self.input_dim == 0 || self.outputs == 0 {
            return bad("zero dimension");
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return bad("empty split");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.shift.is_finite()) {
            return bad("noise and shift must be finite, noise nonnegative");
        }
        if self.kind == TaskKind::TwoGaussiansClassification && self.outputs != 2 {
            return bad("two_gaussians has exactly two classes");
        }
        if self.kind == TaskKind::TwoGaussiansClassification
            && self.input_dim < 2
            && self.shift != 0.0
        {
            return bad("a shifted two_gaussians task needs input_dim >= 2");
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut structure = ChaCha8Rng::seed_from_u64(self.seed ^ STRUCTURE_STREAM);
        // samples depend on the shift too, so source and target tasks do not
        // share inputs
        let mut samples = ChaCha8Rng::seed_from_u64(
            self.seed ^ SAMPLE_STREAM ^ self.shift.to_bits().rotate_left(17),
        );
        let generator: Box<dyn Fn(&mut ChaCha8Rng, usize) -> Batch> = match self.kind {
            TaskKind::TwoGaussiansClassification => {
                let mut u = normal_vec(&mut structure, self.input_dim);
                normalize(&mut u);
                let mut v = normal_vec(&mut structure, self.input_dim);
                let along: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(&u).for_each(|(vi, ui)| *vi -= along * ui);
                normalize(&mut v);
                let (c, s) = (self.shift.cos(), self.shift.sin());
                let dir: Vec<f64> = u.iter().zip(&v).map(|(a, b)| c * a + s * b).collect();
                let half = self.separation / 2.0;
                let (dim, noise) = (self.input_dim, self.noise);
                Box::new(move |rng, n| {
                    let mut inputs = Vec::with_capacity(n * dim);
                    let mut labels = Vec::with_capacity(n);
                    for i in 0..n {
                        let y = i % 2;
                        let sign = if y == 0 { half } else { -half };
                        for d in &dir {
                            inputs.push(sign * d + noise * rng.sample::<f64, _>(StandardNormal));
                        }
                        labels.push(y);
                    }
                    Batch {
                        inputs,
                        input_dim: dim,
                        targets: Targets::Classes(labels),
                    }
                })
            }
            TaskKind::TeacherStudentRegression => {
                let (dim, out, noise) = (self.input_dim, self.outputs, self.noise);
                let hidden = dim.max(4);
                let scale_in = 1.0 / (dim as f64).sqrt();
                let scale_h = 1.0 / (hidden as f64).sqrt();
                let base_a = normal_vec(&mut structure, dim * hidden);
                let base_b = normal_vec(&mut structure, hidden * out);
                let pert_a = normal_vec(&mut structure, dim * hidden);
                let a: Vec<f64> = base_a
                    .iter()
                    .zip(&pert_a)
                    .map(|(x, p)| (x + self.shift * p) * scale_in)
                    .collect();
                let b: Vec<f64> = base_b.iter().map(|x| x * scale_h).collect();
                Box::new(move |rng, n| {
                    let inputs = normal_vec(rng, n * dim);
                    let mut values = Vec::with_capacity(n * out);
                    for x in inputs.chunks(dim) {
                        let h: Vec<f64> = (0..hidden)
                            .map(|j| {
                                (0..dim)
                                    .map(|i| x[i] * a[i * hidden + j])
                                    .sum::<f64>()
                                    .tanh()
                            })
                            .collect();
                        for k in 0..out {
                            let y: f64 = (0..hidden).map(|j| h[j] * b[j * out + k]).sum();
                            values.push(y + noise * rng.sample::<f64, _>(StandardNormal));
                        }
                    }
                    Batch {
                        inputs,
                        input_dim: dim,
                        targets: Targets::Values { values, dim: out },
                    }
                })
            }
        };
        let train = generator(&mut samples, self.n_train);
        let eval = generator(&mut samples, self.n_eval);
        Ok(Dataset { train, eval })
    }
}
