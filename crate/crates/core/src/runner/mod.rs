//! Training loop, evaluation and the experiment suite behind the `ead` CLI.

mod compare;
mod config;
mod experiments;
mod record;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::MetricsError;
use crate::objectives::ObjectiveError;
use crate::policy::PolicyError;
use crate::rollout::RolloutError;

pub use compare::{compare_runs, load_metrics, MetricsTable};
pub use config::{ExperimentConfig, ModelConfig, RunPaths};
pub use experiments::{
    dump_schedule, run_fork_experiment, run_inference_scaling, BranchPoints, ForkRow, ScaleRow,
};
pub use record::{EvalSummary, RunRecord, TrainStats, UpdateStats, REPORT_KS};
pub use train::{eval_prompt_set, evaluate, train, with_workers, EvalOutput, TrainOutcome};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite {what} at step {step}; run aborted")]
    NonFinite { step: u64, what: String },
    #[error("run directory not found: {0}")]
    MissingRun(PathBuf),
    #[error("malformed metrics file {path}: {reason}")]
    BadMetrics { path: PathBuf, reason: String },
    #[error("incompatible eval cadence: {0}")]
    IncompatibleCadence(String),
    #[error("need at least two run directories, got {0}")]
    TooFewRuns(usize),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}
