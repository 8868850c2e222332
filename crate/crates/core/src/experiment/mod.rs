//! Experiment orchestration: config files, the model-variant menu, stage
//! sequencing with checkpoint lineage, and report emission.

mod config;
mod run;
mod variant;

pub use config::{
    BaseSpec, BilingualOptions, DirectionPolicy, EvalConfig, ExperimentConfig, Plan, StageConfig, StageRunConfig,
    TokenizerSpec, VocabSpec, SCHEMA_VERSION,
};
pub use run::{
    derive_seed, evaluate_checkpoint, read_lines, run_experiment, run_stages, ExperimentOutcome, ExperimentSummary, FailureRecord,
    PerplexityPoint, StageRecord, StageRunOutcome,
};
pub use variant::Variant;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

impl ExperimentError {
    /// Process exit code: 1 for configuration problems, 2 for everything
    /// that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        ExperimentError::Stage { stage: stage.to_string(), message: e.to_string() }
    }
}
