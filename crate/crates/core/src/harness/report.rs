//! JSON reports with CSV side files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{confidence_interval, ExperimentResult, Interval, PoolCounts, SetupKind};
use crate::attack::EpsilonConfig;
use crate::scoring::{BinningConfig, Scorecard};
use crate::{stats, Result};

pub const REPORT_VERSION: u32 = 1;
const HISTOGRAM_BINS: usize = 20;
const INTERVAL_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_forgetting_quality: f64,
    pub mean_final_score: f64,
    /// 95% percentile intervals; absent for a single estimate.
    pub forgetting_quality_interval: Option<Interval>,
    pub final_score_interval: Option<Interval>,
}

/// Everything an evaluation produced except wall-clock timings, so equal
/// configurations give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub algorithm: String,
    pub setup: SetupKind,
    pub delta: f64,
    pub binning: BinningConfig,
    pub epsilon: EpsilonConfig,
    pub n: usize,
    pub experiments: usize,
    pub pool_size: Option<usize>,
    pub base_seed: u64,
    pub pool_counts: PoolCounts,
    pub forget_indices: Vec<usize>,
    pub summary: Summary,
    pub scorecards: Vec<Scorecard>,
    /// The configuration as resolved by the caller, verbatim.
    pub resolved_config: String,
}

impl Report {
    pub fn from_result(result: &ExperimentResult, resolved_config: &str) -> Result<Self> {
        let cfg = &result.config;
        let f = result.forgetting_qualities();
        let fin = result.final_scores();
        let interval = |xs: &[f64]| -> Result<Option<Interval>> {
            if xs.len() >= 2 {
                confidence_interval(xs, INTERVAL_LEVEL).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            report_version: REPORT_VERSION,
            algorithm: cfg.pipeline.name.clone(),
            setup: cfg.setup,
            delta: cfg.epsilon.delta,
            binning: cfg.binning.clone(),
            epsilon: cfg.epsilon.clone(),
            n: cfg.n,
            experiments: cfg.experiments,
            pool_size: (cfg.setup == SetupKind::Bootstrap).then(|| cfg.pool_size()),
            base_seed: cfg.base_seed,
            pool_counts: result.pool_counts,
            forget_indices: result.forget_indices.clone(),
            summary: Summary {
                mean_forgetting_quality: stats::mean(&f),
                mean_final_score: stats::mean(&fin),
                forgetting_quality_interval: interval(&f)?,
                final_score_interval: interval(&fin)?,
            },
            scorecards: result.scorecards.clone(),
            resolved_config: resolved_config.to_string(),
        })
    }

    /// `<stem>.epsilons.csv`: one row per forget example, one column per estimate.
    pub fn epsilons_path(path: &Path) -> PathBuf {
        side_path(path, "epsilons")
    }

    /// `<stem>.histogram.csv`: statistic histograms of both worlds.
    pub fn histogram_path(path: &Path) -> PathBuf {
        side_path(path, "histogram")
    }
}

fn side_path(path: &Path, kind: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{kind}.csv"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_eps(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

fn epsilon_csv(report: &Report) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["example_index".to_string()];
    header.extend((0..report.scorecards.len()).map(|e| format!("estimate_{e}")));
    w.write_record(&header).map_err(csv_err)?;
    for (row, idx) in report.forget_indices.iter().enumerate() {
        let mut rec = vec![idx.to_string()];
        rec.extend(report.scorecards.iter().map(|c| fmt_eps(c.epsilons[row])));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
}

fn histogram_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["estimate", "world", "bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
    for (e, (u, r)) in result.statistics.iter().enumerate() {
        let values = |m: &crate::attack::StatMatrix| -> Vec<f64> { (0..m.rows()).flat_map(|i| m.row(i).to_vec()).collect() };
        let (uv, rv) = (values(u), values(r));
        let lo = uv.iter().chain(&rv).copied().fold(f64::INFINITY, f64::min);
        let hi = uv.iter().chain(&rv).copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
        for (name, vals) in [("unlearned", &uv), ("retrained", &rv)] {
            let mut counts = [0usize; HISTOGRAM_BINS];
            for v in vals.iter() {
                let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[b] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                w.write_record(&[
                    e.to_string(),
                    name.to_string(),
                    format!("{}", lo + b as f64 * width),
                    format!("{}", lo + (b + 1) as f64 * width),
                    c.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
}

fn csv_err(e: csv::Error) -> crate::Error {
    std::io::Error::other(e.to_string()).into()
}

/// Writes the JSON report to `path` plus the epsilon and histogram side files.
pub fn emit_report(result: &ExperimentResult, resolved_config: &str, path: &Path) -> Result<Report> {
    let report = Report::from_result(result, resolved_config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.write_all(b"\n")?;
    write_atomic(path, &json)?;
    write_atomic(&Report::epsilons_path(path), &epsilon_csv(&report)?)?;
    write_atomic(&Report::histogram_path(path), &histogram_csv(result)?)?;
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
