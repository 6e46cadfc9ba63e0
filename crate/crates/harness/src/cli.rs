//! The `gem` command line.
//!
//! Exit codes: 0 on success (including `--help` and `--version`), 1 on a
//! usage error, 2 on a data error (missing or malformed files, invalid
//! configs, failed runs).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use gem_core::mask_engine::{load_masks, save_masks};
use gem_core::model_store::load_snapshot;
use gem_core::strategies::{make_mask, StrategyName, StrategySpec};

use crate::config::ExperimentConfig;
use crate::report::{format_table, summarize_dir};
use crate::runner::run_experiment;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gem",
    version,
    about = "Sparse fine-tuning masks from gradient-to-weight ratios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a mask file from a weight checkpoint and a gradient checkpoint.
    BuildMask {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        grads: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value = "gem")]
        strategy: StrategyName,
        #[arg(long, default_value_t = gem_core::scoring::DEFAULT_EPS)]
        eps: f64,
        /// Seed for the `random` strategy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Allocation plan JSON; defaults to `<out>.plan.json`.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Substring patterns overriding the manifest's tunable flags.
        #[arg(long, num_args = 1..)]
        tunable: Option<Vec<String>>,
    },
    /// Run an experiment config and write its report directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Report directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the aggregate, weight-change and captured-share tables of a report directory.
    Report { dir: PathBuf },
    /// Summarize a mask file.
    Inspect { file: PathBuf },
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_DATA
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::BuildMask {
            weights,
            grads,
            ratio,
            strategy,
            eps,
            seed,
            out: mask_path,
            plan,
            tunable,
        } => {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Failure::Usage(anyhow!("--ratio {ratio} outside (0, 1]")));
            }
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Failure::Usage(anyhow!("--eps {eps} must be positive")));
            }
            let mut w = load_snapshot(&weights)
                .with_context(|| format!("loading {}", weights.display()))?;
            let mut g =
                load_snapshot(&grads).with_context(|| format!("loading {}", grads.display()))?;
            if let Some(p) = &tunable {
                w.set_tunable_by_patterns(p);
                g.set_tunable_by_patterns(p);
            }
            let spec = StrategySpec {
                name: strategy,
                seed,
                eps,
                ratio,
            };
            let ms = make_mask(&spec, &w, &g)
                .context("building masks")?
                .with_gradient_source(format!("checkpoint {}", grads.display()));
            save_masks(&ms, &mask_path).context("writing mask file")?;
            let plan_path = plan.unwrap_or_else(|| plan_path_for(&mask_path));
            let text =
                serde_json::to_string_pretty(&ms.provenance.plan).map_err(anyhow::Error::from)?;
            fs::write(&plan_path, text + "\n")
                .with_context(|| format!("writing {}", plan_path.display()))?;
            let p = &ms.provenance.plan;
            let _ = writeln!(out, "B = {} of N = {}", p.total_budget, p.total_params);
            for l in &p.layers {
                let _ = writeln!(out, "{}\tk = {}", l.layer_name, l.budget);
            }
            Ok(())
        }
        Command::Train { config, out: dir } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let dir = dir.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
                Failure::Usage(anyhow!("no --out given and the config has no output_dir"))
            })?;
            let report = run_experiment(&cfg, Some(&dir)).map_err(anyhow::Error::from)?;
            let _ = writeln!(
                out,
                "wrote {} cells to {}",
                report.cells.len(),
                dir.display()
            );
            let _ = write!(out, "{}", format_table(&report.aggregates));
            Ok(())
        }
        Command::Report { dir } => {
            let aggregates = summarize_dir(&dir).map_err(anyhow::Error::from)?;
            let _ = write!(out, "{}", format_table(&aggregates));
            Ok(())
        }
        Command::Inspect { file } => {
            let ms = load_masks(&file).with_context(|| format!("reading {}", file.display()))?;
            let p = &ms.provenance;
            let _ = writeln!(
                out,
                "strategy {}  ratio {}  eps {:e}  allocator {}  B = {} of N = {}",
                p.strategy,
                p.ratio,
                p.eps,
                p.plan.allocator.name(),
                p.plan.total_budget,
                p.plan.total_params
            );
            let _ = writeln!(out, "gradient source: {}", p.gradient_source);
            let _ = writeln!(
                out,
                "{:<24} {:>14} {:>10} {:>12} {:>12}",
                "layer", "shape", "k", "gamma", "entropy"
            );
            for (m, l) in ms.masks.iter().zip(&p.plan.layers) {
                let shape = m
                    .shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x");
                let _ = writeln!(
                    out,
                    "{:<24} {:>14} {:>10} {:>12.6} {:>12.6}",
                    m.layer_name,
                    shape,
                    m.len(),
                    l.share,
                    l.entropy
                );
            }
            Ok(())
        }
    }
}

fn plan_path_for(mask: &Path) -> PathBuf {
    let mut s = mask.as_os_str().to_owned();
    s.push(".plan.json");
    PathBuf::from(s)
}
