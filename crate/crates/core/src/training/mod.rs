//! Staged next-token objectives: batching, loss, reverse pass, optimizer and
//! the stage runner.

mod batch;
mod data;
mod grad;
pub mod gradcheck;
mod loss;
mod mixture;
mod optim;
mod stage;

pub use batch::{Batch, BatchRow};
pub use data::{
    format_instruction, make_bilingual_sequence, pack_monolingual, parse_instructions_jsonl, parse_parallel_tsv,
    render_instruction, render_prompt, BilingualLoss, BilingualPair, Direction, InstructionExample, PromptIds,
    INPUT_HEADER, INSTRUCTION_HEADER, RESPONSE_HEADER,
};
pub use grad::{backward, batch_loss, corpus_loss, perplexity, LossAndGradients};
pub use loss::{next_token_loss, LossValue};
pub use mixture::{build_mixture, Draw, InstructionDataset, Mixture, MixtureSpec};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, Moments, Schedule};
pub use stage::{stage_mask, train_stage, CurvePoint, Hyperparams, LossCurve, StageKind, StageOutcome, TrainingStage};

use thiserror::Error;

use crate::model::ModelError;
use crate::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss mask selects no positions")]
    EmptyLossMask,
    #[error("non-finite gradient for `{0}`")]
    NanGradient(String),
    #[error("training diverged at step {step}: loss stayed above the divergence bound (initial loss {initial})")]
    Diverged { step: usize, initial: f64, curve: Box<LossCurve> },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
}
