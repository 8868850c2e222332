use std::collections::HashSet;

use unicode_normalization::UnicodeNormalization;

pub fn dedup_key(s: &str) -> String {
    s.trim().nfc().collect()
}

/// Remembers keys seen so far; the first occurrence of each is admitted.
#[derive(Debug, Default, Clone)]
pub struct Deduplicator {
    seen: HashSet<String>,
}

impl Deduplicator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn admit(&mut self, s: &str) -> bool {
        self.seen.insert(dedup_key(s))
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

pub fn deduplicate<I, S>(sentences: I) -> impl Iterator<Item = S>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut d = Deduplicator::new();
    sentences.into_iter().filter(move |s| d.admit(s.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_occurrence_wins() {
        let out: Vec<&str> = deduplicate(["a", "b", "a"]).collect();
        assert_eq!(out, vec!["a", "b"]);
        assert_eq!(deduplicate(Vec::<String>::new()).count(), 0);
    }

    #[test]
    fn key_ignores_padding_and_normal_form() {
        let out: Vec<&str> = deduplicate(["caf\u{e9}", " cafe\u{301} ", "cafe"]).collect();
        assert_eq!(out, vec!["caf\u{e9}", "cafe"]);
    }
}
