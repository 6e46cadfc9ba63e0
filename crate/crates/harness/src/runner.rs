use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use gem_core::mask_engine::MaskSet;
use gem_core::strategies::{make_mask, StrategyName, StrategySpec};
use gem_core::toy_models::{
    accumulate_gradients, init_model, pretrain, train_masked, Dataset, ToyModelSpec, TrainSettings,
};
use gem_core::{GemError, ModelSnapshot};

use crate::config::ExperimentConfig;
use crate::report::{aggregate, write_report_dir, CellReport, CellRow, Report};
use crate::HarnessError;

/// Worker count from `GEM_WORKERS`, else the available parallelism.
pub fn workers_from_env() -> Result<usize, HarnessError> {
    match std::env::var("GEM_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                HarnessError::Config(format!("GEM_WORKERS={v:?} is not a positive integer"))
            }),
        Err(_) => Ok(thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs every cell of `config` with [`workers_from_env`] workers and, when
/// `out_dir` is given, writes the report directory there.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<Report, HarnessError> {
    run_experiment_with_workers(config, out_dir, workers_from_env()?)
}

struct SeedContext {
    spec: ToyModelSpec,
    w0: ModelSnapshot,
    g0: ModelSnapshot,
    target: Dataset,
}

struct Cell {
    strategy: StrategyName,
    ratio: f64,
    seed: u64,
    seed_index: usize,
}

/// Runs `f` over `items` on up to `workers` threads. After the first error
/// no new item is started; unstarted items come back as `None`.
fn parallel_map<I: Sync, T: Send>(
    items: &[I],
    workers: usize,
    f: impl Fn(&I) -> Result<T, HarnessError> + Sync,
) -> Vec<Option<Result<T, HarnessError>>> {
    let slots: Vec<Mutex<Option<Result<T, HarnessError>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap()).collect()
}

fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedContext, HarnessError> {
    let spec = config.model_for_seed(seed);
    let (source, target) = config.tasks_for_seed(seed);
    let source = source.generate()?;
    let target = target.generate()?;
    let settings = TrainSettings {
        optimizer: config.pretrain.optimizer,
        epochs: config.pretrain.epochs,
        batch_size: config.batch_size,
        shuffle_seed: seed,
        eps: config.eps,
    };
    let w0 = pretrain(&spec, &init_model(&spec)?, &source, &settings)?;
    check_snapshot(&w0)?;
    let g0 = accumulate_gradients(
        &spec,
        &w0,
        &target.train,
        config.batch_size,
        config.grad_batches,
    )?;
    check_snapshot(&g0)?;
    Ok(SeedContext {
        spec,
        w0,
        g0,
        target,
    })
}

fn check_snapshot(s: &ModelSnapshot) -> Result<(), GemError> {
    s.layers().iter().try_for_each(|l| l.check_finite())
}

fn gradient_source(config: &ExperimentConfig) -> String {
    let batches = config
        .grad_batches
        .map_or_else(|| "all".to_string(), |n| format!("first {n}"));
    format!(
        "mean gradient over {batches} target training batches of size {} at the pre-trained weights",
        config.batch_size
    )
}

fn run_cell(
    config: &ExperimentConfig,
    ctx: &SeedContext,
    cell: &Cell,
) -> Result<(CellReport, MaskSet), HarnessError> {
    let spec = StrategySpec {
        name: cell.strategy,
        seed: cell.seed,
        eps: config.eps,
        ratio: cell.ratio,
    };
    let masks = make_mask(&spec, &ctx.w0, &ctx.g0)?.with_gradient_source(gradient_source(config));
    let settings = TrainSettings {
        optimizer: config.optimizer,
        epochs: config.epochs,
        batch_size: config.batch_size,
        shuffle_seed: cell.seed,
        eps: config.eps,
    };
    let outcome = train_masked(&ctx.spec, &ctx.w0, &ctx.target, &masks, &ctx.g0, &settings)?;
    check_snapshot(&outcome.model)?;
    let share = gem_core::scoring::captured_share(
        &gem_core::mask_engine::score_layers(
            &ctx.w0,
            &ctx.g0,
            gem_core::mask_engine::Scorer::Gwr,
            config.eps,
        )?,
        &masks.masks,
    )?;
    let last = outcome.records.last();
    let row = CellRow {
        strategy: cell.strategy,
        ratio: cell.ratio,
        seed: cell.seed,
        budget: masks.selected_count(),
        captured_share: share,
        initial_loss: outcome.initial_loss,
        initial_metric: outcome.initial_metric,
        final_loss: last.map_or(outcome.initial_loss, |r| r.loss),
        final_metric: last.map_or(outcome.initial_metric, |r| r.metric),
        rel_change: last.map_or(0.0, |r| r.rel_change),
        loss_red_proxy: last.map_or(0.0, |r| r.loss_red_proxy),
    };
    for (name, v) in [
        ("final_loss", row.final_loss),
        ("final_metric", row.final_metric),
        ("rel_change", row.rel_change),
        ("loss_red_proxy", row.loss_red_proxy),
    ] {
        if !v.is_finite() {
            return Err(HarnessError::Report(format!(
                "{name} is {v}; training diverged"
            )));
        }
    }
    let report = CellReport {
        mask_file: mask_file_name(cell.strategy, cell.ratio, cell.seed),
        row,
        plan: masks.provenance.plan.clone(),
        records: outcome.records,
    };
    Ok((report, masks))
}

pub fn mask_file_name(strategy: StrategyName, ratio: f64, seed: u64) -> String {
    format!("masks/{strategy}_r{ratio}_s{seed}.gemm")
}

/// Like [`run_experiment`] with an explicit worker count.
///
/// Cells are independent and deterministic, and results are assembled in
/// config order (strategy, then ratio, then seed), so the report does not
/// depend on `workers`. If a cell fails, the completed cells are written to
/// `out_dir` as an incomplete report and the error names the cell.
pub fn run_experiment_with_workers(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<Report, HarnessError> {
    config.validate()?;
    let seeds: Vec<(usize, u64)> = config.seeds.iter().copied().enumerate().collect();
    let prepared = parallel_map(&seeds, workers, |&(_, seed)| {
        prepare_seed(config, seed).map_err(|e| HarnessError::Seed {
            seed,
            source: Box::new(e),
        })
    });
    let mut contexts = Vec::with_capacity(seeds.len());
    let mut seed_error = None;
    for r in prepared {
        match r {
            Some(Ok(c)) => contexts.push(Some(c)),
            Some(Err(e)) => {
                seed_error.get_or_insert(e);
                contexts.push(None);
            }
            None => contexts.push(None),
        }
    }

    let mut cells = Vec::new();
    for &strategy in &config.strategies {
        for &ratio in &config.ratios {
            for &(seed_index, seed) in &seeds {
                cells.push(Cell {
                    strategy,
                    ratio,
                    seed,
                    seed_index,
                });
            }
        }
    }
    let results = if seed_error.is_some() {
        Vec::new()
    } else {
        parallel_map(&cells, workers, |cell| {
            let ctx = contexts[cell.seed_index].as_ref().expect("prepared seed");
            run_cell(config, ctx, cell).map_err(|e| HarnessError::Cell {
                strategy: cell.strategy,
                ratio: cell.ratio,
                seed: cell.seed,
                source: Box::new(e),
            })
        })
    };

    let mut done = Vec::new();
    let mut first_error = seed_error;
    for r in results.into_iter().flatten() {
        match r {
            Ok(x) => done.push(x),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let (cell_reports, masks): (Vec<CellReport>, Vec<MaskSet>) = done.into_iter().unzip();
    let rows: Vec<CellRow> = cell_reports.iter().map(|c| c.row.clone()).collect();
    let report = Report {
        code_version: format!("gem-harness {}", env!("CARGO_PKG_VERSION")),
        complete: first_error.is_none(),
        config: ExperimentConfig {
            output_dir: None,
            ..config.clone()
        },
        aggregates: aggregate(&rows),
        cells: cell_reports,
    };
    if let Some(dir) = out_dir {
        write_report_dir(dir, &report, &masks)?;
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
