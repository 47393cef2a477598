//! Per-example epsilon from threshold attacks on a one-dimensional statistic.
//!
//! For one forget example, `u` holds the logit-scaled confidences of the
//! unlearned models and `r` those of the retrained models. An attack rule
//! predicts "unlearned" on its positive region:
//!
//! | rule | orientation 0 | orientation 1 |
//! |---|---|---|
//! | single `t` | `x > t` | `x <= t` |
//! | double `t1 < t2` | `t1 < x <= t2` | `x <= t1 or x > t2` |
//!
//! `FPR` is the fraction of `r` predicted unlearned and `FNR` the fraction of
//! `u` predicted retrained. Each rule yields
//! `max(ln((1 - delta - FPR) / FNR), ln((1 - delta - FNR) / FPR))`, ignoring
//! branches with a non-positive numerator; `FPR = FNR = 0` gives `+inf` and
//! exactly one zero rate discards the rule. The estimate is the largest value
//! over all rules that are not discarded.

mod kde;

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{logit_scale, ModelParams};
use crate::{Error, Result};

pub use kde::{kde_tail_mass, silverman_bandwidth, BANDWIDTH_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum World {
    Unlearned,
    Retrained,
}

/// Statistics of one world: `rows` forget examples by `cols` model samples.
#[derive(Debug, Clone, PartialEq)]
pub struct StatMatrix {
    world: World,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StatMatrix {
    pub fn from_rows(world: World, rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols < 2 {
            return Err(Error::invalid("stat matrix needs >= 1 row and >= 2 columns"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in &rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    expected: cols,
                    got: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("stat matrix entries must be finite"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            world,
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn world(&self) -> World {
        self.world
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Keeps the given columns, in the given order (repeats allowed).
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let rows = (0..self.rows)
            .map(|i| cols.iter().map(|&j| self.row(i)[j]).collect())
            .collect();
        Self::from_rows(self.world, rows)
    }

    /// Plain CSV, one row per example and one column per model, no header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for i in 0..self.rows {
            out.write_record(self.row(i).iter().map(|v| v.to_string()))
                .map_err(|e| Error::invalid(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, world: World, origin: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let row = rec
                .iter()
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: origin.to_path_buf(),
                        line,
                        message: format!("`{f}`: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(world, rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_csv(path: &Path, world: World) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?), world, path)
    }
}

/// Entry `(i, j)` is `logit_scale(confidence_correct(models[j], x_i, y_i))`
/// for the examples `idx`.
pub fn collect_statistics(models: &[ModelParams], ds: &Dataset, idx: &[usize], world: World) -> Result<StatMatrix> {
    if models.len() < 2 {
        return Err(Error::invalid("statistics need at least two models"));
    }
    let arch = models[0].arch();
    if models.iter().any(|m| m.arch() != arch) {
        return Err(Error::ArchitectureMismatch("models in one world differ in architecture".into()));
    }
    let rows = idx
        .iter()
        .map(|&i| {
            let e = ds.get(i);
            models
                .iter()
                .map(|m| m.confidence_correct(&e.features, e.label).map(logit_scale))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    StatMatrix::from_rows(world, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AttackRule {
    Single { t: f64, flipped: bool },
    Double { t1: f64, t2: f64, flipped: bool },
}

impl AttackRule {
    /// Whether the rule predicts "unlearned" for `x`.
    pub fn positive(&self, x: f64) -> bool {
        match *self {
            AttackRule::Single { t, flipped } => (x > t) != flipped,
            AttackRule::Double { t1, t2, flipped } => (t1 < x && x <= t2) != flipped,
        }
    }
}

/// `(FPR, FNR)` of `rule` on the two rows.
pub fn rule_rates(rule: &AttackRule, u: &[f64], r: &[f64]) -> (f64, f64) {
    let fp = r.iter().filter(|&&x| rule.positive(x)).count();
    let fn_ = u.iter().filter(|&&x| !rule.positive(x)).count();
    (fp as f64 / r.len() as f64, fn_ as f64 / u.len() as f64)
}

/// `None` means the rule is discarded.
pub fn eps_from_rates(fpr: f64, fnr: f64, delta: f64) -> Option<f64> {
    if fpr == 0.0 && fnr == 0.0 {
        return Some(f64::INFINITY);
    }
    if fpr == 0.0 || fnr == 0.0 {
        return None;
    }
    let branch = |num: f64, den: f64| if num > 0.0 { (num / den).ln() } else { f64::NAN };
    let a = branch(1.0 - delta - fpr, fnr);
    let b = branch(1.0 - delta - fnr, fpr);
    let m = a.max(b);
    (!m.is_nan()).then_some(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonConfig {
    pub delta: f64,
    /// Size of the rank grid of cut points used for double-threshold rules
    /// once the pooled row has more than `q_grid - 1` distinct values.
    pub q_grid: usize,
    /// Estimates above the cap are lowered to it before scoring.
    pub cap: Option<f64>,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        Self {
            delta: 0.0,
            q_grid: 64,
            cap: None,
        }
    }
}

impl EpsilonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::invalid("delta must be in [0, 1)"));
        }
        if self.q_grid < 2 {
            return Err(Error::invalid("q_grid must be >= 2"));
        }
        if let Some(c) = self.cap {
            if !(c >= 0.0) {
                return Err(Error::invalid("epsilon cap must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub epsilon: f64,
    /// Every candidate rule was discarded; `epsilon` is then 0.
    pub all_discarded: bool,
    pub best_rule: Option<AttackRule>,
}

/// Candidate cut points over the pooled sorted distinct values
/// `v_0 < ... < v_{m-1}`: cut `i` separates indices `< i` from `>= i`, with
/// cuts 0 and `m` at minus and plus infinity and interior cuts at midpoints.
struct Cuts {
    thresholds: Vec<f64>,
    /// Number of `u` (resp. `r`) values above each cut.
    above_u: Vec<usize>,
    above_r: Vec<usize>,
}

impl Cuts {
    fn new(u: &[f64], r: &[f64]) -> Self {
        let mut pooled: Vec<f64> = u.iter().chain(r).copied().collect();
        pooled.sort_by(f64::total_cmp);
        pooled.dedup();
        let m = pooled.len();
        let mut thresholds = Vec::with_capacity(m + 1);
        thresholds.push(f64::NEG_INFINITY);
        for w in pooled.windows(2) {
            let mid = w[0] + (w[1] - w[0]) / 2.0;
            thresholds.push(if mid < w[1] { mid } else { w[0] });
        }
        thresholds.push(f64::INFINITY);
        let above = |row: &[f64]| {
            let mut hist = vec![0usize; m + 1];
            for x in row {
                let rank = pooled.partition_point(|v| v < x);
                hist[rank] += 1;
            }
            // above[i] = #values with rank >= i
            let mut acc = vec![0usize; m + 1];
            let mut run = 0;
            for i in (0..=m).rev() {
                run += hist[i];
                acc[i] = run;
            }
            acc
        };
        Self {
            above_u: above(u),
            above_r: above(r),
            thresholds,
        }
    }

    fn len(&self) -> usize {
        self.thresholds.len()
    }
}

struct Best {
    eps: f64,
    rule: Option<AttackRule>,
}

impl Best {
    fn offer(&mut self, eps: Option<f64>, rule: impl FnOnce() -> AttackRule) {
        if let Some(e) = eps {
            if self.rule.is_none() || e > self.eps {
                self.eps = e;
                self.rule = Some(rule());
            }
        }
    }
}

fn search(u: &[f64], r: &[f64], cfg: &EpsilonConfig) -> Best {
    let cuts = Cuts::new(u, r);
    let (nu, nr) = (u.len(), r.len());
    let (fu, fr) = (nu as f64, nr as f64);
    let delta = cfg.delta;
    let mut best = Best {
        eps: 0.0,
        rule: None,
    };
    let c = cuts.len();

    // single thresholds on interior cuts
    for i in 1..c - 1 {
        let (pu, pr) = (cuts.above_u[i], cuts.above_r[i]);
        let t = cuts.thresholds[i];
        best.offer(eps_from_rates(pr as f64 / fr, (nu - pu) as f64 / fu, delta), || {
            AttackRule::Single { t, flipped: false }
        });
        best.offer(eps_from_rates((nr - pr) as f64 / fr, pu as f64 / fu, delta), || {
            AttackRule::Single { t, flipped: true }
        });
    }

    // double thresholds over all cut pairs, or over a rank grid of cuts
    let grid: Vec<usize> = if c <= cfg.q_grid {
        (0..c).collect()
    } else {
        let mut g: Vec<usize> = (0..cfg.q_grid)
            .map(|q| ((q as f64) * (c - 1) as f64 / (cfg.q_grid - 1) as f64).round() as usize)
            .collect();
        g.dedup();
        g
    };
    for (a, &i) in grid.iter().enumerate() {
        for &j in &grid[a + 1..] {
            let pu = cuts.above_u[i] - cuts.above_u[j];
            let pr = cuts.above_r[i] - cuts.above_r[j];
            let (t1, t2) = (cuts.thresholds[i], cuts.thresholds[j]);
            best.offer(eps_from_rates(pr as f64 / fr, (nu - pu) as f64 / fu, delta), || {
                AttackRule::Double { t1, t2, flipped: false }
            });
            best.offer(eps_from_rates((nr - pr) as f64 / fr, pu as f64 / fu, delta), || {
                AttackRule::Double { t1, t2, flipped: true }
            });
        }
    }
    best
}

fn check_rows(rows: &[&[f64]]) -> Result<()> {
    for r in rows {
        if r.len() < 2 {
            return Err(Error::invalid("attack rows need >= 2 samples"));
        }
        if r.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("attack rows must not contain NaN"));
        }
    }
    Ok(())
}

fn finish(best: Best, cfg: &EpsilonConfig) -> EpsilonEstimate {
    match best.rule {
        None => EpsilonEstimate {
            epsilon: 0.0,
            all_discarded: true,
            best_rule: None,
        },
        Some(rule) => {
            let mut e = best.eps.max(0.0);
            if let Some(cap) = cfg.cap {
                e = e.min(cap);
            }
            EpsilonEstimate {
                epsilon: e,
                all_discarded: false,
                best_rule: Some(rule),
            }
        }
    }
}

/// Strongest-attack epsilon for one forget example. Negative values, which
/// only arise for `delta > 0`, are reported as 0.
pub fn per_example_epsilon(u: &[f64], r: &[f64], cfg: &EpsilonConfig) -> Result<EpsilonEstimate> {
    cfg.validate()?;
    check_rows(&[u, r])?;
    Ok(finish(search(u, r, cfg), cfg))
}

/// Fit/eval variant: the best rule is chosen on the fit rows, and its rates
/// are the positive-region masses of Gaussian KDEs of the eval rows.
pub fn per_example_epsilon_disentangled(
    u_fit: &[f64],
    r_fit: &[f64],
    u_eval: &[f64],
    r_eval: &[f64],
    cfg: &EpsilonConfig,
) -> Result<EpsilonEstimate> {
    cfg.validate()?;
    check_rows(&[u_fit, r_fit, u_eval, r_eval])?;
    let Some(rule) = search(u_fit, r_fit, cfg).rule else {
        return Ok(finish(Best { eps: 0.0, rule: None }, cfg));
    };
    let hu = silverman_bandwidth(u_eval);
    let hr = silverman_bandwidth(r_eval);
    let mass = |row: &[f64], h: f64| match rule {
        AttackRule::Single { t, flipped } => {
            let above = kde_tail_mass(row, h, t);
            if flipped {
                1.0 - above
            } else {
                above
            }
        }
        AttackRule::Double { t1, t2, flipped } => {
            let inside = kde_tail_mass(row, h, t1) - kde_tail_mass(row, h, t2);
            if flipped {
                1.0 - inside
            } else {
                inside
            }
        }
    };
    let fpr = mass(r_eval, hr).clamp(0.0, 1.0);
    let fnr = (1.0 - mass(u_eval, hu)).clamp(0.0, 1.0);
    let eps = eps_from_rates(fpr, fnr, cfg.delta);
    let best = Best {
        eps: eps.unwrap_or(0.0),
        rule: eps.map(|_| rule),
    };
    Ok(finish(best, cfg))
}

/// Per-row estimates for two matrices over the same forget examples.
pub fn epsilon_vector(u: &StatMatrix, r: &StatMatrix, cfg: &EpsilonConfig) -> Result<Vec<EpsilonEstimate>> {
    if u.rows() != r.rows() {
        return Err(Error::Dimension {
            expected: u.rows(),
            got: r.rows(),
        });
    }
    (0..u.rows())
        .into_par_iter()
        .map(|i| per_example_epsilon(u.row(i), r.row(i), cfg))
        .collect()
}

/// Fit on one half of the columns of each matrix and evaluate on the other.
pub fn epsilon_vector_disentangled(
    u: &StatMatrix,
    r: &StatMatrix,
    cfg: &EpsilonConfig,
) -> Result<Vec<EpsilonEstimate>> {
    if u.rows() != r.rows() {
        return Err(Error::Dimension {
            expected: u.rows(),
            got: r.rows(),
        });
    }
    let (hu, hr) = (u.cols() / 2, r.cols() / 2);
    (0..u.rows())
        .into_par_iter()
        .map(|i| {
            let (ur, rr) = (u.row(i), r.row(i));
            per_example_epsilon_disentangled(&ur[..hu], &rr[..hr], &ur[hu..], &rr[hr..], cfg)
        })
        .collect()
}
