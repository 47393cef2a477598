//! Acceptance suite. Each test is one criterion and prints a PASS/FAIL line
//! with the measured quantities; run with `--nocapture` to see them.
//!
//! The toy problem: 400 subjects with 3 to 7 examples each (about 2,000
//! examples), 16 features, 10 classes, an MLP [16, 32, 10], 2.5% of the
//! training subjects forgotten (|S| about 40), N = 64 models per world and
//! E = 5 estimates.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use forgetbench::attack::{eps_from_rates, per_example_epsilon, rule_rates, AttackRule, EpsilonConfig};
use forgetbench::data::{generate_synthetic, make_splits, SyntheticSpec};
use forgetbench::harness::{
    confidence_interval, emit_report, null_epsilon_quantile, spearman, Evaluator, ExperimentResult, Interval,
    PoolKind, Problem,
};
use forgetbench::scoring::{accuracy_gap, final_score, forgetting_quality, mia_gap, BinningConfig};
use forgetbench::train::{train, TrainConfig};
use forgetbench::unlearn::{
    identity, make_preset, preset_names, retrain_oracle, run_pipeline, RuntimeBudget, UnlearnContext,
};
use forgetbench::{stats, Architecture, ExperimentConfig, ModelPoolStore, PipelineSpec, SetupKind};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const N: usize = 64;
const E: usize = 5;
const LEVEL: f64 = 0.95;
const NULL_TRIALS: usize = 2000;

fn report(criterion: u32, pass: bool, detail: String) {
    println!("criterion {criterion:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn toy_problem() -> Problem {
    let ds = generate_synthetic(&SyntheticSpec::new(400, (3, 7), 10, 16, 0.5), 11).unwrap();
    let splits = make_splits(&ds, [0.8, 0.1, 0.1], 0.025, 11).unwrap();
    Problem::new(ds, splits, Architecture::new(vec![16, 32, 10]).unwrap()).unwrap()
}

fn algorithms() -> Vec<PipelineSpec> {
    vec![identity(), make_preset("finetune").unwrap(), retrain_oracle(&TrainConfig::default())]
}

fn experiment(setup: SetupKind, pipeline: PipelineSpec) -> ExperimentConfig {
    ExperimentConfig {
        base_seed: 2024,
        ..ExperimentConfig::new(N, E, setup, pipeline)
    }
}

struct Toy {
    _dir: tempfile::TempDir,
    /// `[setup][algorithm]` for FULL, REUSE_N_N and BOOTSTRAP.
    results: Vec<Vec<ExperimentResult>>,
    self_calibration: Vec<f64>,
}

const SETUPS: [SetupKind; 3] = [SetupKind::Full, SetupKind::ReuseNN, SetupKind::Bootstrap];

fn toy() -> &'static Toy {
    static CELL: OnceLock<Toy> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let problem = toy_problem();
        let dir = tempfile::tempdir().unwrap();
        let store = ModelPoolStore::open(dir.path()).unwrap();
        let (results, self_calibration) = {
            let mut ev = Evaluator::new(&problem, &store, TrainConfig::default(), 2024);
            let results = SETUPS
                .iter()
                .map(|&setup| {
                    algorithms()
                        .into_iter()
                        .map(|alg| ev.run(&experiment(setup, alg)).unwrap())
                        .collect()
                })
                .collect();
            let cal = ev.self_calibration(N, &EpsilonConfig::default()).unwrap();
            (results, cal)
        };
        println!(
            "toy problem: {} examples, |S| = {}, pools built and scored in {:.1?}",
            problem.ds.len(),
            problem.splits.forget.len(),
            start.elapsed()
        );
        Toy {
            _dir: dir,
            results,
            self_calibration,
        }
    })
}

fn interval(xs: &[f64]) -> Interval {
    confidence_interval(xs, LEVEL).unwrap()
}

#[test]
fn criterion_01_epsilon_formula() {
    let start = Instant::now();
    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-12);
    let mut ok = eps_from_rates(0.0, 0.0, 0.0) == Some(f64::INFINITY)
        && eps_from_rates(0.0, 0.0, 0.3) == Some(f64::INFINITY)
        && close(eps_from_rates(0.5, 0.5, 0.0), 0.0)
        && close(eps_from_rates(0.1, 0.2, 0.0), (0.8f64 / 0.1).ln().max((0.9f64 / 0.2).ln()))
        && close(eps_from_rates(0.1, 0.2, 0.0), 8f64.ln())
        && eps_from_rates(0.0, 0.3, 0.0).is_none()
        && eps_from_rates(0.3, 0.0, 0.0).is_none();
    let below = AttackRule::Single { t: 4.5, flipped: true };
    ok &= rule_rates(&below, &[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]) == (0.0, 0.0);
    let below = AttackRule::Single { t: 2.5, flipped: true };
    ok &= rule_rates(&below, &[1.0, 3.0], &[2.0, 4.0]) == (0.5, 0.5);
    let elapsed = start.elapsed();
    report(1, ok && elapsed < Duration::from_secs(1), format!("in {elapsed:.1?}"));
}

#[test]
fn criterion_02_brute_force_oracle() {
    let start = Instant::now();
    let mut g = forgetbench::rng::stream(7, "acceptance-oracle");
    let cfg = EpsilonConfig::default();
    let mut mismatches = 0;
    for case in 0..200 {
        let n = g.random_range(2..=8);
        let m = g.random_range(2..=8);
        // small integer support forces ties
        let coarse = case % 2 == 0;
        let mut draw = |k: usize| -> Vec<f64> {
            (0..k)
                .map(|_| if coarse { g.random_range(0..5) as f64 } else { g.random_range(-3.0..3.0) })
                .collect()
        };
        let u = draw(n);
        let r = draw(m);
        let got = per_example_epsilon(&u, &r, &cfg).unwrap();
        let want = common::brute_force_epsilon(&u, &r, 0.0);
        let agree = match want {
            Some(w) => got.epsilon == w.max(0.0) && !got.all_discarded,
            None => got.epsilon == 0.0 && got.all_discarded,
        };
        if !agree {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        2,
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches} mismatches in 200 cases, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_03_gradient_correctness() {
    let start = Instant::now();
    let worst = common::loss_variants()
        .iter()
        .map(|s| (s.name(), common::worst_gradient_error(s, 100, 3)))
        .collect::<Vec<_>>();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    report(
        3,
        max <= common::GRAD_REL_TOL && elapsed < Duration::from_secs(30),
        format!("worst relative error {max:.2e} over {} variants, {elapsed:.1?}", worst.len()),
    );
}

#[test]
fn criterion_04_null_calibration() {
    let t = toy();
    let bound = null_epsilon_quantile(N, 0.95, NULL_TRIALS, 99, &EpsilonConfig::default()).unwrap();
    let med = stats::median(&t.self_calibration);
    report(
        4,
        med <= bound,
        format!("median self-calibration eps {med:.3} vs null 95th percentile {bound:.3}"),
    );
}

#[test]
fn criterion_05_ordering() {
    let full = &toy().results[0];
    let iv: Vec<Interval> = full.iter().map(|r| interval(&r.forgetting_qualities())).collect();
    let (id, ft, or) = (iv[0], iv[1], iv[2]);
    let disjoint = id.hi < or.lo;
    let between = (ft.mean >= id.mean || ft.overlaps(&id)) && (ft.mean <= or.mean || ft.overlaps(&or));
    report(
        5,
        id.mean < or.mean && disjoint && between,
        format!(
            "F identity {:.3} [{:.3}, {:.3}], finetune {:.3} [{:.3}, {:.3}], oracle {:.3} [{:.3}, {:.3}]",
            id.mean, id.lo, id.hi, ft.mean, ft.lo, ft.hi, or.mean, or.lo, or.hi
        ),
    );
}

#[test]
fn criterion_06_setup_stability() {
    let t = toy();
    let means = |s: usize| -> Vec<f64> {
        t.results[s].iter().map(|r| stats::mean(&r.forgetting_qualities())).collect()
    };
    let (full, reuse) = (means(0), means(1));
    let rho = spearman(&full, &reuse).unwrap();
    report(6, rho == 1.0, format!("Spearman {rho} between FULL {full:.3?} and REUSE_N_N {reuse:.3?}"));
}

#[test]
fn criterion_07_bootstrap_fidelity() {
    let t = toy();
    let mut ok = true;
    let mut parts = Vec::new();
    for (a, alg) in algorithms().iter().enumerate() {
        let full = interval(&t.results[0][a].forgetting_qualities());
        let boot = stats::mean(&t.results[2][a].forgetting_qualities());
        let diff = (boot - full.mean).abs();
        ok &= diff <= full.half_width();
        parts.push(format!("{}: |{boot:.3} - {:.3}| = {diff:.3} vs {:.3}", alg.name, full.mean, full.half_width()));
    }
    report(7, ok, parts.join("; "));
}

#[test]
fn criterion_08_compute_accounting() {
    let problem = toy_problem();
    let (n, e) = (4, 3);
    let train = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (setup, want) in [
        (SetupKind::Full, (n * e, n * e)),
        (SetupKind::ReuseNN, (n, n)),
        (SetupKind::ReuseN1, (1, n)),
        (SetupKind::Bootstrap, (8 * n, 8 * n)),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelPoolStore::open(dir.path()).unwrap();
        let cfg = ExperimentConfig {
            train: train.clone(),
            ..ExperimentConfig::new(n, e, setup, identity())
        };
        Evaluator::new(&problem, &store, train.clone(), 0).run(&cfg).unwrap();
        let got = (
            store.count(PoolKind::Original).unwrap(),
            store.count(PoolKind::Retrained).unwrap(),
        );
        ok &= got == want;
        parts.push(format!("{setup:?} {}/{}", got.0, got.1));
    }
    report(8, ok, format!("N = {n}, E = {e}: {}", parts.join(", ")));
}

#[test]
fn criterion_09_scoring_arithmetic() {
    let ok = final_score(0.37, 0.9, 0.9, 0.8, 0.8).unwrap() == 0.37
        && (final_score(0.4, 0.95, 1.0, 0.90, 1.0).unwrap() - 0.342).abs() <= 1e-12
        && (accuracy_gap(0.936, 0.856) - 0.080).abs() <= 1e-12
        && forgetting_quality(&[0.0, 0.7], &BinningConfig::default()).unwrap() == 0.75;
    report(9, ok, "ratio identity, 0.342 and 0.080 checked".to_string());
}

#[test]
fn criterion_10_determinism() {
    let problem = toy_problem();
    let cfg = ExperimentConfig {
        base_seed: 5,
        ..ExperimentConfig::new(8, 2, SetupKind::ReuseNN, make_preset("finetune").unwrap())
    };
    let out = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let store_dir = tempfile::tempdir().unwrap();
        let store = ModelPoolStore::open(store_dir.path()).unwrap();
        let res = Evaluator::new(&problem, &store, cfg.train.clone(), cfg.base_seed).run(&cfg).unwrap();
        let path = out.path().join(format!("run{run}.json"));
        emit_report(&res, "", &path).unwrap();
        let side = |p: std::path::PathBuf| std::fs::read(p).unwrap();
        files.push((
            std::fs::read(&path).unwrap(),
            side(forgetbench::harness::Report::epsilons_path(&path)),
            side(forgetbench::harness::Report::histogram_path(&path)),
        ));
    }
    let same = files[0] == files[1];
    report(10, same, format!("report {} bytes, identical: {same}", files[0].0.len()));
}

#[test]
fn criterion_11_runtime_budget() {
    let problem = toy_problem();
    let train_cfg = TrainConfig::default();
    // reference: median of three timed retrains
    let mut times: Vec<f64> = (0..3)
        .map(|s| {
            let t = Instant::now();
            train(&problem.ds, &problem.splits.retain, &problem.arch, &train_cfg, s).unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let reference = Duration::from_secs_f64(times[1]);
    let original = train(&problem.ds, &problem.splits.train, &problem.arch, &train_cfg, 42).unwrap();
    let ctx = UnlearnContext::new(&problem.ds, &problem.splits, &original).unwrap();
    let budget = RuntimeBudget::new(0.2, Some(reference)).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in preset_names() {
        let run = run_pipeline(&make_preset(name).unwrap(), &ctx, 1, &budget).unwrap();
        let ratio = run.elapsed.as_secs_f64() / reference.as_secs_f64();
        // within budget, or exceeding it and flagged
        ok &= (ratio <= 0.2) || run.over_budget;
        parts.push(format!("{name} {ratio:.3}{}", if run.over_budget { " (flagged)" } else { "" }));
    }
    let tiny = RuntimeBudget::new(1e-9, Some(reference)).unwrap();
    let flagged = run_pipeline(&make_preset("finetune").unwrap(), &ctx, 1, &tiny).unwrap().over_budget;
    report(
        11,
        ok && flagged,
        format!("retrain {reference:.1?}; time / retrain: {}; 1e-9 budget flagged: {flagged}", parts.join(", ")),
    );
}

#[test]
fn criterion_12_mia_null() {
    let normal = Normal::new(1.0, 0.5).unwrap();
    let mut g = forgetbench::rng::stream(12, "acceptance-mia");
    let mut draw = || -> Vec<f64> { (0..1000).map(|_| normal.sample(&mut g)).collect() };
    let (uf, ut, rf, rt) = (draw(), draw(), draw(), draw());
    let gap = mia_gap(&uf, &ut, &rf, &rt, 10, 3).unwrap();
    report(
        12,
        gap.gap <= 0.05,
        format!(
            "scores {:.3} / {:.3}, gap {:.4}",
            gap.score_unlearned, gap.score_retrained, gap.gap
        ),
    );
}
