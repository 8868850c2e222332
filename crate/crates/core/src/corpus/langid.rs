use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::CorpusError;

const ORDER: usize = 3;

/// Probability that a piece of text belongs to a target language.
pub trait LanguageScorer: Sync {
    fn score(&self, text: &str) -> f64;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GramCounts {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

/// Character 3-gram multinomial profiles with Laplace smoothing, one per
/// language, compared under equal priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramProfile {
    pub target: String,
    pub languages: BTreeMap<String, GramCounts>,
    /// Number of distinct n-grams over all languages, plus one for unseen.
    pub support: u64,
}

fn normalize(text: &str) -> Vec<char> {
    let mut out = vec![' '];
    for w in text.split_whitespace() {
        out.extend(w.chars().flat_map(char::to_lowercase));
        out.push(' ');
    }
    out
}

fn grams(text: &str) -> impl Iterator<Item = String> {
    let chars = normalize(text);
    let n = chars.len().saturating_sub(ORDER - 1);
    (0..n).map(move |i| chars[i..i + ORDER].iter().collect())
}

impl NgramProfile {
    /// Trains from `(language, samples)` pairs. `target` must be one of them
    /// and at least one contrast language is required.
    pub fn train<S: AsRef<str>>(target: &str, samples: &[(&str, &[S])]) -> Result<Self, CorpusError> {
        let mut languages: BTreeMap<String, GramCounts> = BTreeMap::new();
        for (lang, texts) in samples {
            let entry = languages.entry(lang.to_string()).or_default();
            for t in texts.iter() {
                for g in grams(t.as_ref()) {
                    *entry.counts.entry(g).or_default() += 1;
                    entry.total += 1;
                }
            }
        }
        if !languages.contains_key(target) {
            return Err(CorpusError::Config(format!("no samples for target language `{target}`")));
        }
        if languages.len() < 2 {
            return Err(CorpusError::Config("language profile needs a contrast language".into()));
        }
        if languages.values().any(|g| g.total == 0) {
            return Err(CorpusError::Config("every language needs non-empty samples".into()));
        }
        let distinct: BTreeSet<&String> = languages.values().flat_map(|g| g.counts.keys()).collect();
        let support = distinct.len() as u64 + 1;
        Ok(NgramProfile { target: target.to_string(), languages, support })
    }

    /// Profile shipped with the crate: Persian against English.
    pub fn persian_default() -> Self {
        let fa: Vec<&str> = include_str!("../../data/seeds/fa.txt").lines().collect();
        let en: Vec<&str> = include_str!("../../data/seeds/en.txt").lines().collect();
        NgramProfile::train("fa", &[("fa", &fa), ("en", &en)]).expect("seed files are valid")
    }

    pub fn log_likelihood(&self, lang: &str, text: &str) -> Option<f64> {
        let g = self.languages.get(lang)?;
        let denom = (g.total + self.support) as f64;
        Some(grams(text).map(|k| ((g.counts.get(&k).copied().unwrap_or(0) + 1) as f64 / denom).ln()).sum())
    }
}

impl LanguageScorer for NgramProfile {
    fn score(&self, text: &str) -> f64 {
        if text.trim().is_empty() {
            return 0.0;
        }
        let target = self.log_likelihood(&self.target, text).expect("target present");
        let others: f64 = self
            .languages
            .keys()
            .filter(|l| **l != self.target)
            .map(|l| (self.log_likelihood(l, text).expect("present") - target).exp())
            .sum();
        1.0 / (1.0 + others)
    }
}
