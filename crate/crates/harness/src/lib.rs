//! Config-driven experiment runner for sparse fine-tuning masks, plus the
//! pieces of the `gem` command line.
//!
//! An experiment pre-trains a toy model once per seed, builds one mask per
//! `(strategy, ratio, seed)` cell from the accumulated target-task gradient,
//! fine-tunes the masked parameters and writes a report directory:
//!
//! | file            | contents                                             |
//! |-----------------|------------------------------------------------------|
//! | `config.json`   | the experiment config                                |
//! | `report.json`   | every cell with plan and per-epoch records, aggregates |
//! | `cells.csv`     | one row per cell                                     |
//! | `records.csv`   | one row per cell and epoch                           |
//! | `aggregate.csv` | mean and sample std over seeds                       |
//! | `fig2.csv`      | per-cell weight change and loss proxy, max-normalized per ratio |
//! | `table2.csv`    | captured GWR share, mean and std over seeds          |
//! | `masks/`        | `<strategy>_r<ratio>_s<seed>.gemm`                   |

use std::path::{Path, PathBuf};

use gem_core::strategies::StrategyName;
use gem_core::GemError;

pub mod cli;
pub mod config;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, PretrainConfig};
pub use report::{Aggregate, CellReport, CellRow, Report};
pub use runner::{run_experiment, run_experiment_with_workers, workers_from_env};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] GemError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("pre-training for seed {seed} failed: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("cell strategy={strategy} ratio={ratio} seed={seed} failed: {source}")]
    Cell {
        strategy: StrategyName,
        ratio: f64,
        seed: u64,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("report: {0}")]
    Report(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
