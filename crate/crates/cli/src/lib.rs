//! Command-line front end: argument parsing and dispatch.
//!
//! Exit codes: 0 on success, 1 when the library reports an error, 2 for
//! usage errors (bad flags, unknown subcommands, a missing config file).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use forgetbench::config::{LoadedConfig, RunConfig};
use forgetbench::data::save_csv;
use forgetbench::harness::{
    emit_report, load_report, rank_algorithms, run_experiment, Evaluator, PoolKind, Report,
};
use forgetbench::nn::save_checkpoint;
use forgetbench::rng;
use forgetbench::train::accuracy;
use forgetbench::unlearn::{make_preset, preset_names, resolve_pipeline, run_pipeline, stitch, UnlearnContext};
use forgetbench::{ModelPoolStore, RuntimeBudget, SetupKind};

/// Environment variable naming the default model store directory.
pub const STORE_ENV: &str = "FORGETBENCH_STORE";
pub const DEFAULT_STORE: &str = "forgetbench-store";

#[derive(Debug, Parser)]
#[command(name = "forgetbench", version, about = "Per-example epsilon evaluation of unlearning algorithms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the original and retrained pools the experiment needs.
    TrainPool {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Unlearn one original model and save the result as a checkpoint.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Index of the original model in the pool.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Run the configured setup and write a report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Like `evaluate`, with the setup forced to bootstrap resampling.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a config whose pipeline is the erase phases of one algorithm
    /// followed by the repair phases of another.
    Stitch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        erase: String,
        #[arg(long)]
        repair: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rank the algorithms of several reports by final score.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Confidence level of the intervals used for tie groups.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// List the algorithm presets, or print one as TOML.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-path assignment applied after the file is loaded, e.g.
    /// `epsilon.delta=0.01`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// An error that maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses `argv` (program name first) and runs the command, returning the
/// process exit code. Output goes to stdout, diagnostics to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn load(common: &Common) -> Result<LoadedConfig> {
    if !common.config.is_file() {
        return Err(UsageError(format!("config file {} not found", common.config.display())).into());
    }
    Ok(RunConfig::load(&common.config, &common.overrides)?)
}

/// Store directory: the flag, then the config's `store`, then the
/// environment variable, then `./forgetbench-store`.
pub fn store_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.store_dir())
        .or_else(|| std::env::var_os(STORE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
}

fn evaluate(loaded: &LoadedConfig, store: Option<&Path>, output: &Path) -> Result<Vec<String>> {
    let cfg = &loaded.config;
    let problem = cfg.problem()?;
    let exp = cfg.experiment()?;
    let store = ModelPoolStore::open(store_dir(store, cfg))?;
    let result = run_experiment(&exp, &problem, &store)?;
    let report = emit_report(&result, &loaded.resolved, output)?;
    log::info!(
        "{}: mean F {:.4}, mean final score {:.4}",
        report.algorithm,
        report.summary.mean_forgetting_quality,
        report.summary.mean_final_score
    );
    Ok(vec![output.display().to_string()])
}

/// Runs one command and returns the lines to print on success.
pub fn execute(command: Command) -> Result<Vec<String>> {
    match command {
        Command::GenData { common, output } => {
            let cfg = load(&common)?.config;
            save_csv(&cfg.dataset()?, &output)?;
            Ok(vec![output.display().to_string()])
        }
        Command::TrainPool { common, store } => {
            let cfg = load(&common)?.config;
            let problem = cfg.problem()?;
            let exp = cfg.experiment()?;
            let dir = store_dir(store.as_deref(), &cfg);
            let store = ModelPoolStore::open(&dir)?;
            Evaluator::new(&problem, &store, exp.train.clone(), exp.base_seed).build_pools(exp.pool_counts())?;
            log::info!(
                "pools: {} original, {} retrained",
                store.count(PoolKind::Original)?,
                store.count(PoolKind::Retrained)?
            );
            Ok(vec![dir.display().to_string()])
        }
        Command::Unlearn { common, store, output, index } => {
            let cfg = load(&common)?.config;
            let problem = cfg.problem()?;
            let exp = cfg.experiment()?;
            let store = ModelPoolStore::open(store_dir(store.as_deref(), &cfg))?;
            let evaluator = Evaluator::new(&problem, &store, exp.train.clone(), exp.base_seed);
            let counts = forgetbench::harness::PoolCounts {
                original: index + 1,
                retrained: 1,
            };
            evaluator.build_pools(counts)?;
            let original = store.load(PoolKind::Original, index)?;
            let ctx = UnlearnContext::new(&problem.ds, &problem.splits, &original)?;
            let budget = RuntimeBudget::new(exp.budget_fraction, store.reference_train_time()?)?;
            let seed = rng::derive_indexed(exp.base_seed, "unlearn", index as u64);
            let run = run_pipeline(&exp.pipeline, &ctx, seed, &budget)?;
            if run.over_budget {
                log::warn!("{} exceeded the runtime budget", exp.pipeline.name);
            }
            let s = &problem.splits;
            log::info!(
                "accuracy retain {:.4} forget {:.4} test {:.4}",
                accuracy(&run.params, &problem.ds, &s.retain)?,
                accuracy(&run.params, &problem.ds, &s.forget)?,
                accuracy(&run.params, &problem.ds, &s.test)?
            );
            save_checkpoint(&run.params, &output)?;
            Ok(vec![output.display().to_string()])
        }
        Command::Evaluate { common, store, output } => evaluate(&load(&common)?, store.as_deref(), &output),
        Command::Bootstrap { common, store, output } => {
            let mut common = common;
            common.overrides.push("experiment.setup=\"bootstrap\"".into());
            let loaded = load(&common)?;
            debug_assert_eq!(loaded.config.experiment.setup, SetupKind::Bootstrap);
            evaluate(&loaded, store.as_deref(), &output)
        }
        Command::Stitch { common, erase, repair, output } => {
            let loaded = load(&common)?;
            let cfg = &loaded.config;
            let spec = stitch(&resolve_pipeline(&erase, &cfg.train)?, &resolve_pipeline(&repair, &cfg.train)?)?;
            let mut table: toml::Table = toml::from_str(&loaded.resolved)?;
            let mut unlearn = toml::Table::new();
            unlearn.insert("pipeline".into(), toml::Value::try_from(&spec)?);
            table.insert("unlearn".into(), toml::Value::Table(unlearn));
            // The new file may live elsewhere; pin relative paths.
            if let Some(p) = &cfg.store {
                table.insert("store".into(), path_value(&cfg.resolve_path(p))?);
            }
            if let (Some(p), Some(toml::Value::Table(data))) = (&cfg.data.csv, table.get_mut("data")) {
                data.insert("csv".into(), path_value(&cfg.resolve_path(p))?);
            }
            fs::write(&output, toml::to_string(&table)?)
                .with_context(|| format!("writing {}", output.display()))?;
            Ok(vec![output.display().to_string()])
        }
        Command::Report { common, inputs, output, level } => {
            // Only checked for existence and validity; reports carry their own configs.
            load(&common)?;
            let reports = inputs
                .iter()
                .map(|p| load_report(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<Report>>>()?;
            let text = ranking_table(&reports, level)?;
            match output {
                Some(path) => {
                    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
                    Ok(vec![path.display().to_string()])
                }
                None => Ok(text.lines().map(str::to_string).collect()),
            }
        }
        Command::Presets { show } => match show {
            Some(name) => Ok(vec![make_preset(&name)?.to_toml()?]),
            None => Ok(preset_names().iter().map(|s| s.to_string()).collect()),
        },
    }
}

fn path_value(p: &Path) -> Result<toml::Value> {
    let abs = std::path::absolute(p)?;
    match abs.to_str() {
        Some(s) => Ok(toml::Value::String(s.to_string())),
        None => bail!("path {} is not valid UTF-8", abs.display()),
    }
}

/// Tab-separated ranking: rank, algorithm, mean final score, mean F.
/// Algorithms whose final-score intervals overlap share a rank.
pub fn ranking_table(reports: &[Report], level: f64) -> Result<String> {
    let scores: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|r| (r.algorithm.clone(), r.scorecards.iter().map(|c| c.final_score).collect()))
        .collect();
    let groups = rank_algorithms(&scores, level)?;
    let mut out = String::from("rank\talgorithm\tfinal_score\tforgetting_quality\n");
    for (rank, group) in groups.iter().enumerate() {
        for name in group {
            let r = reports.iter().find(|r| &r.algorithm == name).expect("ranked name comes from a report");
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\n",
                rank + 1,
                name,
                r.summary.mean_final_score,
                r.summary.mean_forgetting_quality
            ));
        }
    }
    Ok(out)
}
