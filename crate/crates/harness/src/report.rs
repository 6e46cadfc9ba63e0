use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gem_core::allocation::AllocationPlan;
use gem_core::mask_engine::{save_masks, MaskSet};
use gem_core::strategies::StrategyName;
use gem_core::toy_models::TrainRecord;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::HarnessError;

/// One `(strategy, ratio, seed)` cell, as written to `cells.csv`.
///
/// With zero epochs the final values equal the initial ones and both
/// training metrics are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub strategy: StrategyName,
    pub ratio: f64,
    pub seed: u64,
    pub budget: usize,
    /// Captured GWR share of the mask, fixed at mask time.
    pub captured_share: f64,
    pub initial_loss: f64,
    pub initial_metric: f64,
    pub final_loss: f64,
    pub final_metric: f64,
    pub rel_change: f64,
    pub loss_red_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    #[serde(flatten)]
    pub row: CellRow,
    /// Relative to the report directory.
    pub mask_file: String,
    pub plan: AllocationPlan,
    pub records: Vec<TrainRecord>,
}

/// Mean and sample standard deviation over the seeds of one
/// `(strategy, ratio)` group. A single seed has std 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: StrategyName,
    pub ratio: f64,
    pub n: usize,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub final_metric_mean: f64,
    pub final_metric_std: f64,
    pub rel_change_mean: f64,
    pub rel_change_std: f64,
    pub loss_red_proxy_mean: f64,
    pub loss_red_proxy_std: f64,
    pub captured_share_mean: f64,
    pub captured_share_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub code_version: String,
    /// False when a cell failed and only the finished cells are listed.
    pub complete: bool,
    pub config: ExperimentConfig,
    pub cells: Vec<CellReport>,
    pub aggregates: Vec<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    pub strategy: StrategyName,
    pub ratio: f64,
    pub seed: u64,
    pub rel_change: f64,
    pub loss_red_proxy: f64,
    pub rel_change_norm: f64,
    pub loss_red_proxy_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub strategy: StrategyName,
    pub ratio: f64,
    pub n: usize,
    pub captured_share_mean: f64,
    pub captured_share_std: f64,
}

#[derive(Serialize)]
struct RecordRow {
    strategy: StrategyName,
    ratio: f64,
    seed: u64,
    epoch: usize,
    loss: f64,
    metric: f64,
    rel_change: f64,
    loss_red_proxy: f64,
    captured_share: f64,
}

/// Plain left-to-right mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut sum = 0.0;
    for x in xs {
        sum += x;
    }
    let mean = sum / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    for x in xs {
        ss += (x - mean) * (x - mean);
    }
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Groups in first-appearance order of `(strategy, ratio)`, seeds in row order.
fn groups(rows: &[CellRow]) -> Vec<Vec<&CellRow>> {
    let mut out: Vec<Vec<&CellRow>> = Vec::new();
    for r in rows {
        match out
            .iter_mut()
            .find(|g| g[0].strategy == r.strategy && g[0].ratio == r.ratio)
        {
            Some(g) => g.push(r),
            None => out.push(vec![r]),
        }
    }
    out
}

pub fn aggregate(rows: &[CellRow]) -> Vec<Aggregate> {
    groups(rows)
        .into_iter()
        .map(|g| {
            let stat =
                |f: fn(&CellRow) -> f64| mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (final_loss_mean, final_loss_std) = stat(|r| r.final_loss);
            let (final_metric_mean, final_metric_std) = stat(|r| r.final_metric);
            let (rel_change_mean, rel_change_std) = stat(|r| r.rel_change);
            let (loss_red_proxy_mean, loss_red_proxy_std) = stat(|r| r.loss_red_proxy);
            let (captured_share_mean, captured_share_std) = stat(|r| r.captured_share);
            Aggregate {
                strategy: g[0].strategy,
                ratio: g[0].ratio,
                n: g.len(),
                final_loss_mean,
                final_loss_std,
                final_metric_mean,
                final_metric_std,
                rel_change_mean,
                rel_change_std,
                loss_red_proxy_mean,
                loss_red_proxy_std,
                captured_share_mean,
                captured_share_std,
            }
        })
        .collect()
}

/// Per-cell rows with both metrics divided by their maximum within the
/// same ratio, so the largest value of each panel is 1.
pub fn fig2_rows(rows: &[CellRow]) -> Vec<Fig2Row> {
    let max_of = |ratio: f64, f: fn(&CellRow) -> f64| {
        rows.iter()
            .filter(|r| r.ratio == ratio)
            .map(f)
            .fold(0.0, f64::max)
    };
    let norm = |x: f64, m: f64| if m > 0.0 { x / m } else { 0.0 };
    rows.iter()
        .map(|r| Fig2Row {
            strategy: r.strategy,
            ratio: r.ratio,
            seed: r.seed,
            rel_change: r.rel_change,
            loss_red_proxy: r.loss_red_proxy,
            rel_change_norm: norm(r.rel_change, max_of(r.ratio, |c| c.rel_change)),
            loss_red_proxy_norm: norm(r.loss_red_proxy, max_of(r.ratio, |c| c.loss_red_proxy)),
        })
        .collect()
}

pub fn table2_rows(aggregates: &[Aggregate]) -> Vec<Table2Row> {
    aggregates
        .iter()
        .map(|a| Table2Row {
            strategy: a.strategy,
            ratio: a.ratio,
            n: a.n,
            captured_share_mean: a.captured_share_mean,
            captured_share_std: a.captured_share_std,
        })
        .collect()
}

fn write_csv<S: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = S>,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_cells(dir: &Path) -> Result<Vec<CellRow>, HarnessError> {
    let path = dir.join("cells.csv");
    if !path.is_file() {
        return Err(HarnessError::Report(format!(
            "{} not found",
            path.display()
        )));
    }
    let mut r = csv::Reader::from_path(&path)?;
    let rows = r.deserialize().collect::<Result<Vec<CellRow>, _>>()?;
    Ok(rows)
}

/// Writes `aggregate.csv`, `fig2.csv` and `table2.csv` from the rows of
/// `cells.csv` in `dir`.
pub fn summarize_dir(dir: &Path) -> Result<Vec<Aggregate>, HarnessError> {
    let rows = read_cells(dir)?;
    write_summaries(dir, &rows)
}

fn write_summaries(dir: &Path, rows: &[CellRow]) -> Result<Vec<Aggregate>, HarnessError> {
    let aggregates = aggregate(rows);
    write_csv(&dir.join("aggregate.csv"), &aggregates)?;
    write_csv(&dir.join("fig2.csv"), fig2_rows(rows))?;
    write_csv(&dir.join("table2.csv"), table2_rows(&aggregates))?;
    Ok(aggregates)
}

pub fn write_report_dir(
    dir: &Path,
    report: &Report,
    masks: &[MaskSet],
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir.join("masks")).map_err(|e| HarnessError::io(dir, e))?;
    write_json(&dir.join("config.json"), &report.config)?;
    write_json(&dir.join("report.json"), report)?;
    let rows: Vec<CellRow> = report.cells.iter().map(|c| c.row.clone()).collect();
    write_csv(&dir.join("cells.csv"), &rows)?;
    write_csv(
        &dir.join("records.csv"),
        report.cells.iter().flat_map(|c| {
            c.records.iter().map(|r| RecordRow {
                strategy: c.row.strategy,
                ratio: c.row.ratio,
                seed: c.row.seed,
                epoch: r.epoch,
                loss: r.loss,
                metric: r.metric,
                rel_change: r.rel_change,
                loss_red_proxy: r.loss_red_proxy,
                captured_share: r.captured_share,
            })
        }),
    )?;
    for (cell, ms) in report.cells.iter().zip(masks) {
        save_masks(ms, dir.join(&cell.mask_file))?;
    }
    write_summaries(dir, &rows)?;
    Ok(())
}

/// Human-readable `mean ± std` table, one line per `(strategy, ratio)`.
pub fn format_table(aggregates: &[Aggregate]) -> String {
    let mut s = format!(
        "{:<20} {:>8} {:>3}  {:<23} {:<23} {:<23} {:<23}\n",
        "strategy", "ratio", "n", "final_metric", "rel_change", "loss_red_proxy", "captured_share"
    );
    for a in aggregates {
        let pm = |m: f64, sd: f64| format!("{m:.4e} ± {sd:.2e}");
        let _ = writeln!(
            s,
            "{:<20} {:>8} {:>3}  {:<23} {:<23} {:<23} {:<23}",
            a.strategy.as_str(),
            a.ratio,
            a.n,
            pm(a.final_metric_mean, a.final_metric_std),
            pm(a.rel_change_mean, a.rel_change_std),
            pm(a.loss_red_proxy_mean, a.loss_red_proxy_std),
            pm(a.captured_share_mean, a.captured_share_std),
        );
    }
    s
}
