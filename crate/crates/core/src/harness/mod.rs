//! Experiment orchestration: configs, the training loops, comparison runs,
//! the oracle front end and the gradient-check suite used by the CLI.

mod compare;
mod config;
mod gradcheck;
mod oracle;
mod train;

pub use compare::{compare, CompareRow};
pub use config::{Algorithm, EvalSection, ExperimentConfig, OverlongSection, RegSection, TaskSection, TrainSection};
pub use gradcheck::{gradcheck_suite, GradCheckEntry};
pub use oracle::{OracleEnvFile, OraclePolicy};
pub use train::{datasets, evaluate, format_warmup, train, EvalPoint, RunSummary, StepOutcome, Trainer};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; batch written to {dump}")]
    NonFinite { step: usize, dump: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Rollout(#[from] crate::rollout::RolloutError),
    #[error(transparent)]
    Rl(#[from] crate::rlcore::RlError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Info(#[from] crate::infotheory::InfoError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Token-mean entropy of the sampling distribution over the step's rollouts (nats).
    pub mean_token_entropy: f64,
    pub mean_response_length: f64,
    pub train_reward_mean: f64,
    pub eval_avg_at_k: Option<f64>,
    pub pg_loss: f64,
    pub entropy_reg_value: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub param_l2_from_init: f64,
    pub groups_dropped: usize,
}

pub const CURVES_HEADER: &str = "step,entropy,resp_len,reward,avg_at_k";

impl MetricsRecord {
    pub fn curves_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step,
            self.mean_token_entropy,
            self.mean_response_length,
            self.train_reward_mean,
            self.eval_avg_at_k.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

/// Reads a metrics file back, one record per line.
pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HarnessError::from))
        .collect()
}
