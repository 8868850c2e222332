use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use super::vocab::Provenance;
use super::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub base_size: usize,
    pub new_size: usize,
    pub overlap_count: usize,
    pub merged_size: usize,
    pub overlap_tokens: Vec<String>,
}

/// Appends the tokens of `new` that are not already in `base` (compared
/// after NFC normalization). Base tokens keep their ids; appended tokens get
/// consecutive ids in `new`'s order. A new token whose NFC form matches an
/// earlier appended token is counted as overlap too.
pub fn merge_vocabularies(base: &Vocabulary, new: &Vocabulary) -> (Vocabulary, MergeReport) {
    let mut keys: HashSet<String> = base.iter().map(|t| t.text.nfc().collect()).collect();
    let mut merged = Vocabulary::from_tokens(base.iter().map(|t| (t.text.clone(), t.score, Provenance::Base)))
        .expect("base vocabulary is valid");
    let mut overlap_tokens = Vec::new();
    for t in new.iter() {
        let key: String = t.text.nfc().collect();
        if !keys.insert(key) || merged.contains(&t.text) {
            overlap_tokens.push(t.text.clone());
        } else {
            merged.push(t.text.clone(), t.score, Provenance::New).expect("token absent");
        }
    }
    let report = MergeReport {
        base_size: base.len(),
        new_size: new.len(),
        overlap_count: overlap_tokens.len(),
        merged_size: merged.len(),
        overlap_tokens,
    };
    (merged, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(tokens.iter().map(|s| (s.to_string(), 0.0, Provenance::Base))).unwrap()
    }

    #[test]
    fn disjoint() {
        let (m, r) = merge_vocabularies(&v(&["a", "b"]), &v(&["c"]));
        assert_eq!((r.merged_size, r.overlap_count), (3, 0));
        assert_eq!(m.id_of("c"), Some(2));
        assert_eq!(m.get(2).unwrap().provenance, Provenance::New);
    }

    #[test]
    fn subset_is_absorbed() {
        let base = v(&["a", "b", "c"]);
        let (m, r) = merge_vocabularies(&base, &v(&["c", "a"]));
        assert_eq!(m, base);
        assert_eq!(r.overlap_count, 2);
        assert_eq!(r.overlap_tokens, vec!["c", "a"]);
    }

    #[test]
    fn overlap_uses_nfc() {
        // precomposed é in base, decomposed e + U+0301 in new
        let (_, r) = merge_vocabularies(&v(&["\u{e9}"]), &v(&["e\u{301}", "x"]));
        assert_eq!(r.overlap_count, 1);
        assert_eq!(r.merged_size, 2);
    }

    #[test]
    fn nfc_duplicates_within_new_collapse() {
        let (m, r) = merge_vocabularies(&v(&["a"]), &v(&["\u{e9}", "e\u{301}"]));
        assert_eq!((r.merged_size, r.overlap_count), (2, 1));
        assert_eq!(m.id_of("\u{e9}"), Some(1));
    }

    #[test]
    fn empty_new_is_identity() {
        let base = v(&["a", "b"]);
        let (m, r) = merge_vocabularies(&base, &Vocabulary::empty());
        assert_eq!(m, base);
        assert_eq!(r.merged_size, 2);
    }
}
