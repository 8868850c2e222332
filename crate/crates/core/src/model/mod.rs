//! Llama-style decoder: parameter store, embedding expansion, LoRA adapters,
//! forward/backward passes and parameter accounting.

mod accounting;
mod config;
mod lora;
mod store;
mod tensor;
mod transformer;

pub use accounting::{base_parameter_count, count_parameters, AccountingStage, ParameterCount};
pub use config::ModelConfig;
pub use lora::{attach_lora, merge_lora, AdapterSet, LoraAdapter, LoraSpec};
pub use store::{
    attn_norm_name, build_model, expand_embeddings, ffn_norm_name, parameter_layout, projection_name, InitPolicy,
    Parameter, ParameterStore, Projection, Role, FINAL_NORM, LM_HEAD, TOKEN_EMBEDDING,
};
pub use tensor::Tensor;
pub use transformer::{forward, forward_with, ForwardOptions, FreezeMask, Gradients, Logits};

pub(crate) use transformer::{backward_sequence, forward_sequence};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, position: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("adapters were already merged into the base weights")]
    AdaptersConsumed,
}
