//! Grafting a new language onto a small causal language model.
//!
//! The crate covers the whole adaptation pipeline at desk scale:
//!
//! - [`corpus`]: sentence splitting, rule-based filtering, language scoring
//!   and deduplication of raw documents.
//! - [`tokenizer`]: byte-fallback BPE training, vocabulary merging and
//!   encode/decode.
//! - [`model`]: a Llama-style decoder with embedding expansion, LoRA adapters
//!   and exact parameter accounting.
//! - [`training`]: staged objectives with freeze masks, AdamW and gradient
//!   checking.
//! - [`eval`]: generative classification with refusal detection, BLEU and
//!   report tables.
//! - [`checkpoint`]: on-disk checkpoints with hash-chained lineage and
//!   per-tensor diffs.
//! - [`experiment`]: variant stage plans and the end-to-end runner.
//! - [`synthetic`]: a toy language pair and experiment layout for tests and
//!   demos.

pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod synthetic;
pub mod tokenizer;
pub mod training;
