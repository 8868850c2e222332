//! Subword vocabularies: BPE training with byte fallback, vocabulary
//! merging and encode/decode.

mod bpe;
mod codec;
mod merge;
mod vocab;

pub use bpe::{sample_by_bytes, train_subword, TrainOutcome, TrainerConfig};
pub use codec::Codec;
pub use merge::{merge_vocabularies, MergeReport};
pub use vocab::{byte_token, token_kind, Provenance, Token, TokenKind, Vocabulary, BOS, EOS, PAD, SEP, SPACE_MARK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("target size {target} is below the alphabet size {alphabet}")]
    TargetBelowAlphabet { target: usize, alphabet: usize },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("character {ch:?} at position {position} is not covered and byte fallback is off")]
    Unencodable { ch: char, position: usize },
    #[error("duplicate token `{0}`")]
    Duplicate(String),
    #[error("vocabulary lacks the special token `{0}`")]
    MissingSpecial(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Encodes `text` with a one-off [`Codec`]. Build a `Codec` directly when
/// encoding many strings.
pub fn encode(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>, TokenizerError> {
    Codec::new(vocab).encode(text)
}

pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Result<String, TokenizerError> {
    Codec::new(vocab).decode(ids)
}
