use regex::Regex;
use serde::{Deserialize, Serialize};

use super::langid::LanguageScorer;
use super::split::word_count;
use super::CorpusError;

/// Markup, script and boilerplate markers. Matching is case-insensitive for
/// literal entries; entries prefixed with `re:` are regular expressions.
pub const DEFAULT_BANNED: &[&str] = &[
    "<div", "</", "<script", "<br", "<p>", "<?php", "&nbsp;", "{", "}", "=>", "/*", "*/", "function(", "console.log",
    "javascript", "lorem ipsum", "http://", "https://", "www.", "ادامه مطلب", "کلیک کنید", "تمامی حقوق",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_threshold")]
    pub lang_threshold: f64,
    #[serde(default = "default_banned")]
    pub banned_patterns: Vec<String>,
    #[serde(default = "default_dedup")]
    pub dedup: bool,
}

fn default_min_words() -> usize {
    5
}
fn default_threshold() -> f64 {
    0.70
}
fn default_banned() -> Vec<String> {
    DEFAULT_BANNED.iter().map(|s| s.to_string()).collect()
}
fn default_dedup() -> bool {
    true
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            min_words: default_min_words(),
            lang_threshold: default_threshold(),
            banned_patterns: default_banned(),
            dedup: default_dedup(),
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_words == 0 {
            return Err(CorpusError::Config("min_words must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lang_threshold) {
            return Err(CorpusError::Config(format!("lang_threshold {} is outside [0, 1]", self.lang_threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Short,
    Banned,
    Language,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FilterDecision {
    Keep { lang_score: f64 },
    Drop(DropReason),
}

impl FilterDecision {
    pub fn is_keep(&self) -> bool {
        matches!(self, FilterDecision::Keep { .. })
    }
}

#[derive(Debug, Clone)]
enum Pattern {
    Literal(String),
    Regex(Regex),
}

/// A [`CleaningConfig`] with its patterns compiled.
#[derive(Debug, Clone)]
pub struct SentenceFilter {
    cfg: CleaningConfig,
    patterns: Vec<Pattern>,
}

impl SentenceFilter {
    pub fn new(cfg: &CleaningConfig) -> Result<Self, CorpusError> {
        cfg.validate()?;
        let patterns = cfg
            .banned_patterns
            .iter()
            .map(|p| match p.strip_prefix("re:") {
                Some(re) => Regex::new(re)
                    .map(Pattern::Regex)
                    .map_err(|e| CorpusError::Config(format!("banned pattern `{p}`: {e}"))),
                None => Ok(Pattern::Literal(p.to_lowercase())),
            })
            .collect::<Result<_, _>>()?;
        Ok(SentenceFilter { cfg: cfg.clone(), patterns })
    }

    pub fn config(&self) -> &CleaningConfig {
        &self.cfg
    }

    pub fn is_banned(&self, s: &str) -> bool {
        let lower = s.to_lowercase();
        self.patterns.iter().any(|p| match p {
            Pattern::Literal(l) => lower.contains(l.as_str()),
            Pattern::Regex(r) => r.is_match(s),
        })
    }

    /// Checks short, then banned, then language; the first failing rule wins.
    pub fn decide(&self, s: &str, scorer: &dyn LanguageScorer) -> FilterDecision {
        if word_count(s) < self.cfg.min_words {
            return FilterDecision::Drop(DropReason::Short);
        }
        if self.is_banned(s) {
            return FilterDecision::Drop(DropReason::Banned);
        }
        let lang_score = scorer.score(s);
        if lang_score < self.cfg.lang_threshold {
            return FilterDecision::Drop(DropReason::Language);
        }
        FilterDecision::Keep { lang_score }
    }
}

pub fn filter_sentence(s: &str, cfg: &CleaningConfig, scorer: &dyn LanguageScorer) -> Result<FilterDecision, CorpusError> {
    Ok(SentenceFilter::new(cfg)?.decide(s, scorer))
}
