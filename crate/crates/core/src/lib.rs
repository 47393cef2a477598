//! Evaluation workbench for machine-unlearning algorithms.
//!
//! Pools of small MLP classifiers are trained on a subject-structured dataset,
//! unlearning pipelines are applied to the "original" models, and the result
//! is compared against models retrained without the forget set. Forgetting
//! quality is measured per forget example as an empirical epsilon derived from
//! the strongest threshold attack separating the two worlds, binned into an
//! F-score and adjusted for utility.
//!
//! Module map:
//!
//! - [`nn`]: fixed-family MLP, analytic gradients, losses, SGD, checkpoints.
//! - [`data`]: synthetic data, CSV ingestion, train/val/test and retain/forget splits.
//! - [`train`]: the learning algorithm and accuracy.
//! - [`unlearn`]: erase/repair pipelines, presets and stitching.
//! - [`attack`]: statistic matrices, threshold attacks and per-example epsilon.
//! - [`scoring`]: binned F-score, final score, accuracy gap and MIA gap.
//! - [`harness`]: model pools, sampling setups, bootstrap, reports.
//! - [`config`]: declarative run configuration with dotted-path overrides.
//! - [`stats`]: means, percentiles and medians.
//! - [`rng`]: seeded, labelled substreams.

pub mod attack;
pub mod config;
pub mod data;
mod error;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod scoring;
pub mod stats;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};

pub use attack::{EpsilonConfig, EpsilonEstimate, StatMatrix, World};
pub use data::{Dataset, Example, Splits};
pub use harness::{ExperimentConfig, ModelPoolStore, Problem, SetupKind};
pub use nn::{Architecture, ClassWeights, LossSpec, ModelParams};
pub use scoring::{BinningConfig, Scorecard};
pub use train::TrainConfig;
pub use unlearn::{Phase, PipelineSpec, RuntimeBudget};
