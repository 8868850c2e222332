//! Generative classification with refusal detection, BLEU for generation
//! tasks, random baselines and report tables.

mod harness;
mod metrics;
mod normalize;
mod task;

pub use harness::{
    classify_by_generation, run_eval, EvalOptions, EvalReport, ExampleResult, GenerationRequest, Generator,
    LanguageSummary, ModelGenerator, RandomGenerator, ReportMetadata, TaskResult, DEFAULT_MAX_NEW_TOKENS,
};
pub use metrics::{accuracy, bleu, bleu_stats, bleu_tokens, BleuStats, BLEU_EPSILON};
pub use normalize::{is_punct, normalize, parse_label};
pub use task::{
    load_suite, parse_examples, random_baseline, random_baseline_examples, SuiteEntry, TaskData, TaskExample, TaskKind,
    TaskSpec, TaskSuite,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("task `{0}` is a generation task and has no random baseline")]
    NoBaseline(String),
    #[error("dataset for task `{task}` not found at {path}")]
    MissingDataset { task: String, path: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}
