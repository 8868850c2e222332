//! Sentence-level corpus cleaning: splitting, rule filters, language
//! scoring and exact deduplication.

mod dedup;
mod filter;
mod langid;
mod pipeline;
mod split;

pub use dedup::{dedup_key, deduplicate, Deduplicator};
pub use filter::{filter_sentence, CleaningConfig, DropReason, FilterDecision, SentenceFilter, DEFAULT_BANNED};
pub use langid::{GramCounts, LanguageScorer, NgramProfile};
pub use pipeline::{
    clean_documents, clean_file, read_documents, run_pipeline, CleanSentence, Cleaner, CorpusStats, DropCounts,
    PipelineAbort, RawDocument, SourceStats,
};
pub use split::{is_terminal, split_sentences, split_sentences_bytes, word_count};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Json { line: usize, msg: String },
    #[error("document `{id}`: {msg}")]
    Document { id: String, msg: String },
    #[error("{0}")]
    Config(String),
}
