//! Experiment orchestration: model pools, sampling setups, bootstrap,
//! intervals, ranking and reports.
//!
//! Seeds: original model `k` trains with `derive_indexed(base, "original", k)`,
//! retrained model `k` with `derive_indexed(base, "retrained", k)`, and the
//! unlearning run with seed index `j` uses `derive_indexed(base, "unlearn", j)`.
//! Bootstrap estimate `e` resamples with `stream_indexed(base, "bootstrap", e)`.

mod report;
mod store;

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{epsilon_vector, per_example_epsilon, EpsilonConfig, StatMatrix, World};
use crate::data::{Dataset, Splits};
use crate::nn::{logit_scale, Architecture, ModelParams};
use crate::scoring::{final_score, forgetting_quality, BinningConfig, Scorecard};
use crate::train::{accuracy, TrainConfig};
use crate::unlearn::{run_pipeline, PipelineSpec, RuntimeBudget, UnlearnContext};
use crate::{rng, stats, Error, Result};

pub use report::{emit_report, load_report, Report, Summary};
pub use store::{ModelPoolStore, PoolBuild, PoolEntry, PoolKind, PoolManifest, PoolSpec};

/// Dataset, splits and architecture shared by every model of an experiment.
#[derive(Debug, Clone)]
pub struct Problem {
    pub ds: Dataset,
    pub splits: Splits,
    pub arch: Architecture,
}

impl Problem {
    pub fn new(ds: Dataset, splits: Splits, arch: Architecture) -> Result<Self> {
        splits.validate(&ds)?;
        if arch.input_dim() != ds.feature_dim() || arch.num_classes() != ds.num_classes() {
            return Err(Error::ArchitectureMismatch(format!(
                "architecture {:?} does not fit {} features and {} classes",
                arch.sizes(),
                ds.feature_dim(),
                ds.num_classes()
            )));
        }
        if splits.forget.is_empty() {
            return Err(Error::invalid("the forget set is empty"));
        }
        Ok(Self { ds, splits, arch })
    }

    /// SHA-256 over the data, the splits and the architecture.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.ds.digest_bytes());
        for part in [
            &self.splits.train,
            &self.splits.val,
            &self.splits.test,
            &self.splits.retain,
            &self.splits.forget,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            for &i in part.iter() {
                h.update((i as u64).to_le_bytes());
            }
        }
        for &s in self.arch.sizes() {
            h.update((s as u64).to_le_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupKind {
    /// Fresh original and retrained models for every estimate.
    Full,
    /// One pool of N originals and N retrained models shared by all estimates.
    #[serde(rename = "reuse_n_n")]
    ReuseNN,
    /// A single original model, N unlearning runs per estimate.
    #[serde(rename = "reuse_n_1")]
    ReuseN1,
    /// K triplets resampled with replacement.
    Bootstrap,
}

fn default_experiments() -> usize {
    20
}
fn default_budget() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Models per world per estimate.
    pub n: usize,
    /// Number of estimates E.
    #[serde(default = "default_experiments")]
    pub experiments: usize,
    pub setup: SetupKind,
    /// Bootstrap pool size K; `8 * n` when unset.
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub epsilon: EpsilonConfig,
    #[serde(default)]
    pub binning: BinningConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub pipeline: PipelineSpec,
    /// Allowed unlearning time as a fraction of the median retrain time.
    #[serde(default = "default_budget")]
    pub budget_fraction: f64,
    /// Worker threads; the global rayon pool when unset.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(n: usize, experiments: usize, setup: SetupKind, pipeline: PipelineSpec) -> Self {
        Self {
            n,
            experiments,
            setup,
            pool_size: None,
            base_seed: 0,
            epsilon: EpsilonConfig::default(),
            binning: BinningConfig::default(),
            train: TrainConfig::default(),
            pipeline,
            budget_fraction: default_budget(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("n must be >= 2"));
        }
        if self.experiments < 1 {
            return Err(Error::invalid("at least one experiment is needed"));
        }
        if self.setup == SetupKind::Bootstrap && self.pool_size() < self.n {
            return Err(Error::invalid("bootstrap pool size must be >= n"));
        }
        if self.workers == Some(0) {
            return Err(Error::invalid("workers must be >= 1"));
        }
        self.epsilon.validate()?;
        self.binning.validate()?;
        self.train.validate()?;
        self.pipeline.validate()?;
        RuntimeBudget::new(self.budget_fraction, None)?;
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size.unwrap_or(8 * self.n)
    }

    /// Models per world the setup consumes.
    pub fn pool_counts(&self) -> PoolCounts {
        let (n, e) = (self.n, self.experiments);
        let (original, retrained) = match self.setup {
            SetupKind::Full => (n * e, n * e),
            SetupKind::ReuseNN => (n, n),
            SetupKind::ReuseN1 => (1, n),
            SetupKind::Bootstrap => (self.pool_size(), self.pool_size()),
        };
        PoolCounts { original, retrained }
    }

    /// `(original, unlearn seed index, retrained)` per model slot of each estimate.
    fn plan(&self) -> Vec<Vec<(usize, usize, usize)>> {
        let n = self.n;
        (0..self.experiments)
            .map(|e| match self.setup {
                SetupKind::Full => (0..n).map(|i| (e * n + i, e * n + i, e * n + i)).collect(),
                SetupKind::ReuseNN => (0..n).map(|i| (i, e * n + i, i)).collect(),
                SetupKind::ReuseN1 => (0..n).map(|i| (0, e * n + i, i)).collect(),
                SetupKind::Bootstrap => {
                    let mut g = rng::stream_indexed(self.base_seed, "bootstrap", e as u64);
                    let k = self.pool_size();
                    let mut picks: Vec<usize> = (0..n).map(|_| g.random_range(0..k)).collect();
                    // order does not affect the estimate; sorting makes a draw of
                    // 0..n coincide with the shared-pool estimate exactly
                    picks.sort_unstable();
                    picks.into_iter().map(|t| (t, t, t)).collect()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub original: usize,
    pub retrained: usize,
}

/// Per-model quantities needed for scoring.
#[derive(Debug, Clone)]
struct ModelStats {
    /// Logit-scaled correct-class confidence per forget example.
    forget_stats: Vec<f64>,
    retain_acc: f64,
    test_acc: f64,
    forget_acc: f64,
}

fn model_stats(p: &ModelParams, problem: &Problem) -> Result<ModelStats> {
    let forget_stats = problem
        .splits
        .forget
        .iter()
        .map(|&i| {
            let e = problem.ds.get(i);
            p.confidence_correct(&e.features, e.label).map(logit_scale)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelStats {
        forget_stats,
        retain_acc: accuracy(p, &problem.ds, &problem.splits.retain)?,
        test_acc: accuracy(p, &problem.ds, &problem.splits.test)?,
        forget_acc: accuracy(p, &problem.ds, &problem.splits.forget)?,
    })
}

#[derive(Debug, Clone)]
struct UnlearnedStats {
    stats: ModelStats,
    over_budget: bool,
}

/// Scores of one experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub scorecards: Vec<Scorecard>,
    /// Statistic matrices (unlearned, retrained) per estimate.
    pub statistics: Vec<(StatMatrix, StatMatrix)>,
    pub pool_counts: PoolCounts,
    pub forget_indices: Vec<usize>,
}

impl ExperimentResult {
    pub fn forgetting_qualities(&self) -> Vec<f64> {
        self.scorecards.iter().map(|s| s.forgetting_quality).collect()
    }

    pub fn final_scores(&self) -> Vec<f64> {
        self.scorecards.iter().map(|s| s.final_score).collect()
    }
}

fn mean_of(xs: &[&ModelStats], f: impl Fn(&ModelStats) -> f64) -> f64 {
    stats::mean(&xs.iter().map(|m| f(m)).collect::<Vec<_>>())
}

fn stat_matrix(models: &[&ModelStats], world: World) -> Result<StatMatrix> {
    let rows = (0..models[0].forget_stats.len())
        .map(|i| models.iter().map(|m| m.forget_stats[i]).collect())
        .collect();
    StatMatrix::from_rows(world, rows)
}

fn scorecard(
    u: &[&ModelStats],
    r: &[&ModelStats],
    over_budget: usize,
    eps_cfg: &EpsilonConfig,
    binning: &BinningConfig,
) -> Result<(Scorecard, StatMatrix, StatMatrix)> {
    let um = stat_matrix(u, World::Unlearned)?;
    let rm = stat_matrix(r, World::Retrained)?;
    let est = epsilon_vector(&um, &rm, eps_cfg)?;
    let epsilons: Vec<f64> = est.iter().map(|e| e.epsilon).collect();
    let all_discarded = est.iter().filter(|e| e.all_discarded).count();
    let f = forgetting_quality(&epsilons, binning)?;
    let (ru, rr) = (mean_of(u, |m| m.retain_acc), mean_of(r, |m| m.retain_acc));
    let (tu, tr) = (mean_of(u, |m| m.test_acc), mean_of(r, |m| m.test_acc));
    let mut warnings = Vec::new();
    if over_budget > 0 {
        warnings.push(format!("{over_budget} of {} unlearning runs exceeded the runtime budget", u.len()));
    }
    if all_discarded > 0 {
        warnings.push(format!("{all_discarded} forget examples had every attack rule discarded"));
    }
    let card = Scorecard {
        forgetting_quality: f,
        retain_acc_unlearned: ru,
        retain_acc_retrained: rr,
        test_acc_unlearned: tu,
        test_acc_retrained: tr,
        forget_acc_unlearned: mean_of(u, |m| m.forget_acc),
        forget_acc_retrained: mean_of(r, |m| m.forget_acc),
        final_score: final_score(f, ru, rr, tu, tr)?,
        epsilons,
        all_discarded,
        over_budget,
        warnings,
    };
    Ok((card, um, rm))
}

/// Runs experiments against one store, caching per-model statistics so that
/// setups and algorithms evaluated on the same pools share work.
pub struct Evaluator<'a> {
    problem: &'a Problem,
    store: &'a ModelPoolStore,
    train: TrainConfig,
    base_seed: u64,
    originals: HashMap<usize, ModelParams>,
    retrained: HashMap<usize, ModelStats>,
    /// Keyed by the pipeline's serialized form.
    unlearned: HashMap<String, HashMap<(usize, usize), UnlearnedStats>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a Problem, store: &'a ModelPoolStore, train: TrainConfig, base_seed: u64) -> Self {
        Self {
            problem,
            store,
            train,
            base_seed,
            originals: HashMap::new(),
            retrained: HashMap::new(),
            unlearned: HashMap::new(),
        }
    }

    fn pool_spec(&self) -> PoolSpec<'_> {
        PoolSpec {
            problem: self.problem,
            train: &self.train,
            base_seed: self.base_seed,
        }
    }

    /// Trains (or reuses) the pools a configuration needs.
    pub fn build_pools(&self, counts: PoolCounts) -> Result<()> {
        let spec = self.pool_spec();
        self.store.build_pool(PoolKind::Original, counts.original, &spec)?;
        self.store.build_pool(PoolKind::Retrained, counts.retrained, &spec)?;
        Ok(())
    }

    fn ensure_retrained(&mut self, indices: &[usize]) -> Result<()> {
        let missing: Vec<usize> = indices.iter().copied().filter(|i| !self.retrained.contains_key(i)).collect();
        let (store, problem) = (self.store, self.problem);
        let fresh = missing
            .par_iter()
            .map(|&i| Ok((i, model_stats(&store.load(PoolKind::Retrained, i)?, problem)?)))
            .collect::<Result<Vec<_>>>()?;
        self.retrained.extend(fresh);
        Ok(())
    }

    fn ensure_unlearned(&mut self, pipeline: &PipelineSpec, pairs: &[(usize, usize)], budget: &RuntimeBudget) -> Result<()> {
        let key = pipeline.to_toml()?;
        let cache = self.unlearned.entry(key.clone()).or_default();
        let mut missing: Vec<(usize, usize)> = pairs.iter().copied().filter(|p| !cache.contains_key(p)).collect();
        missing.sort_unstable();
        missing.dedup();
        for &(o, _) in &missing {
            if !self.originals.contains_key(&o) {
                self.originals.insert(o, self.store.load(PoolKind::Original, o)?);
            }
        }
        let (problem, originals, base) = (self.problem, &self.originals, self.base_seed);
        let fresh = missing
            .par_iter()
            .map(|&(o, j)| {
                let ctx = UnlearnContext::new(&problem.ds, &problem.splits, &originals[&o])?;
                let seed = rng::derive_indexed(base, "unlearn", j as u64);
                let run = run_pipeline(pipeline, &ctx, seed, budget)?;
                let stats = model_stats(&run.params, problem)?;
                Ok((
                    (o, j),
                    UnlearnedStats {
                        stats,
                        over_budget: run.over_budget,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        self.unlearned.entry(key).or_default().extend(fresh);
        Ok(())
    }

    pub fn run(&mut self, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
        cfg.validate()?;
        if cfg.train != self.train || cfg.base_seed != self.base_seed {
            return Err(Error::invalid("experiment config disagrees with the evaluator's training recipe or seed"));
        }
        match cfg.workers {
            Some(w) => rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::invalid(e.to_string()))?
                .install(|| self.run_inner(cfg)),
            None => self.run_inner(cfg),
        }
    }

    fn run_inner(&mut self, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
        let counts = cfg.pool_counts();
        self.build_pools(counts)?;
        let budget = RuntimeBudget::new(cfg.budget_fraction, self.store.reference_train_time()?)?;
        let plan = cfg.plan();
        let retrained: Vec<usize> = plan.iter().flatten().map(|t| t.2).collect();
        let pairs: Vec<(usize, usize)> = plan.iter().flatten().map(|t| (t.0, t.1)).collect();
        self.ensure_retrained(&retrained)?;
        self.ensure_unlearned(&cfg.pipeline, &pairs, &budget)?;
        let cache = &self.unlearned[&cfg.pipeline.to_toml()?];
        let mut scorecards = Vec::with_capacity(plan.len());
        let mut statistics = Vec::with_capacity(plan.len());
        for slots in &plan {
            let u: Vec<&UnlearnedStats> = slots.iter().map(|t| &cache[&(t.0, t.1)]).collect();
            let r: Vec<&ModelStats> = slots.iter().map(|t| &self.retrained[&t.2]).collect();
            let over = u.iter().filter(|s| s.over_budget).count();
            let u: Vec<&ModelStats> = u.iter().map(|s| &s.stats).collect();
            let (card, um, rm) = scorecard(&u, &r, over, &cfg.epsilon, &cfg.binning)?;
            scorecards.push(card);
            statistics.push((um, rm));
        }
        Ok(ExperimentResult {
            config: cfg.clone(),
            scorecards,
            statistics,
            pool_counts: counts,
            forget_indices: self.problem.splits.forget.clone(),
        })
    }

    /// Per-example epsilon of retrained models evaluated against other
    /// retrained models (identity unlearning applied to the retrained pool):
    /// models `0..n` form one world and `n..2n` the other.
    pub fn self_calibration(&mut self, n: usize, eps_cfg: &EpsilonConfig) -> Result<Vec<f64>> {
        if n < 2 {
            return Err(Error::invalid("n must be >= 2"));
        }
        self.store.build_pool(PoolKind::Retrained, 2 * n, &self.pool_spec())?;
        let all: Vec<usize> = (0..2 * n).collect();
        self.ensure_retrained(&all)?;
        let u: Vec<&ModelStats> = (0..n).map(|i| &self.retrained[&i]).collect();
        let r: Vec<&ModelStats> = (n..2 * n).map(|i| &self.retrained[&i]).collect();
        let est = epsilon_vector(
            &stat_matrix(&u, World::Unlearned)?,
            &stat_matrix(&r, World::Retrained)?,
            eps_cfg,
        )?;
        Ok(est.iter().map(|e| e.epsilon).collect())
    }
}

/// Runs the configured setup with a fresh evaluator.
pub fn run_experiment(cfg: &ExperimentConfig, problem: &Problem, store: &ModelPoolStore) -> Result<ExperimentResult> {
    Evaluator::new(problem, store, cfg.train.clone(), cfg.base_seed).run(cfg)
}

/// Bootstrap estimates: K triplets built once, each estimate resamples N of
/// them with replacement.
pub fn run_bootstrap(cfg: &ExperimentConfig, problem: &Problem, store: &ModelPoolStore) -> Result<ExperimentResult> {
    let cfg = ExperimentConfig {
        setup: SetupKind::Bootstrap,
        ..cfg.clone()
    };
    run_experiment(&cfg, problem, store)
}

/// The `q`-quantile of per-example epsilon when both worlds draw `n` values
/// from one continuous distribution. The estimate depends on ranks only, so
/// the null distribution does not depend on which distribution is used.
pub fn null_epsilon_quantile(n: usize, q: f64, trials: usize, seed: u64, cfg: &EpsilonConfig) -> Result<f64> {
    if trials == 0 || !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("need trials >= 1 and q in [0, 1]"));
    }
    let eps = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut g = rng::stream_indexed(seed, "null", t as u64);
            let mut draw = || -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut g)).collect() };
            let u = draw();
            let r = draw();
            per_example_epsilon(&u, &r, cfg).map(|e| e.epsilon)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::quantile_sorted(&stats::sorted(&eps), q))
}

/// Mean and percentile interval of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }
}

/// Arithmetic mean with a linear-interpolation percentile interval at `level`.
pub fn confidence_interval(samples: &[f64], level: f64) -> Result<Interval> {
    if samples.len() < 2 {
        return Err(Error::invalid("a confidence interval needs >= 2 samples"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("level must be in (0, 1)"));
    }
    let s = stats::sorted(samples);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        mean: stats::mean(samples),
        lo: stats::quantile_sorted(&s, tail),
        hi: stats::quantile_sorted(&s, 1.0 - tail),
    })
}

/// Algorithms ordered by descending mean score. Neighbours whose intervals
/// overlap share a tied group.
pub fn rank_algorithms(results: &[(String, Vec<f64>)], level: f64) -> Result<Vec<Vec<String>>> {
    if results.is_empty() {
        return Err(Error::invalid("nothing to rank"));
    }
    let mut scored = results
        .iter()
        .map(|(name, xs)| {
            let iv = if xs.len() >= 2 {
                confidence_interval(xs, level)?
            } else {
                let m = stats::mean(xs);
                Interval { mean: m, lo: m, hi: m }
            };
            Ok((name.clone(), iv))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.mean.total_cmp(&a.1.mean));
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut prev: Option<Interval> = None;
    for (name, iv) in scored {
        match (prev, groups.last_mut()) {
            (Some(p), Some(g)) if p.overlaps(&iv) => g.push(name),
            _ => groups.push(vec![name]),
        }
        prev = Some(iv);
    }
    Ok(groups)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length samples of size >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (stats::mean(&rx), stats::mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::invalid("spearman is undefined for a constant sample"));
    }
    Ok(cov / (vx * vy).sqrt())
}
