use std::collections::HashMap;

use super::normalize::is_punct;
use super::EvalError;

/// Smoothing value for n-gram orders with no matches.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Fraction of predictions equal to their gold label; `None` (a refusal)
/// is always wrong.
pub fn accuracy<S: AsRef<str>>(predictions: &[Option<S>], golds: &[S]) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch { left: predictions.len(), right: golds.len() });
    }
    if golds.is_empty() {
        return Err(EvalError::Invalid("accuracy of an empty set".into()));
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref().is_some_and(|p| p.as_ref() == g.as_ref()))
        .count();
    Ok(correct as f64 / golds.len() as f64)
}

/// Whitespace tokens after putting spaces around every punctuation mark.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars() {
        if is_punct(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precisions(&self) -> [f64; 4] {
        let mut p = [0.0; 4];
        for n in 0..4 {
            let m = if self.matches[n] == 0 { BLEU_EPSILON } else { self.matches[n] as f64 };
            p[n] = m / self.totals[n].max(1) as f64;
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp()
    }

    pub fn score(&self) -> f64 {
        let log_mean = self.precisions().iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        self.brevity_penalty() * log_mean.exp()
    }
}

pub fn bleu_stats<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<BleuStats, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch { left: hypotheses.len(), right: references.len() });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::Invalid("BLEU of an empty corpus".into()));
    }
    let mut s = BleuStats { matches: [0; 4], totals: [0; 4], hyp_len: 0, ref_len: 0 };
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        let ht = bleu_tokens(h.as_ref());
        let rt = bleu_tokens(r.as_ref());
        if rt.is_empty() {
            return Err(EvalError::EmptyReference(i));
        }
        s.hyp_len += ht.len();
        s.ref_len += rt.len();
        for n in 1..=4 {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            s.totals[n - 1] += ht.len().saturating_sub(n - 1);
            s.matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    Ok(s)
}

/// Corpus-level BLEU-4 in `[0, 1]`: geometric mean of clipped n-gram
/// precisions times `exp(min(0, 1 − r/h))`.
pub fn bleu<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<f64, EvalError> {
    Ok(bleu_stats(hypotheses, references)?.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[Some("a"), Some("b")], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(accuracy(&[None, Some("b")], &["a", "b"]).unwrap(), 0.5);
        assert!(accuracy(&[Some("a")], &["a", "b"]).is_err());
        assert!(accuracy::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn tokens_detach_punctuation() {
        assert_eq!(bleu_tokens("Hello, world!"), vec!["Hello", ",", "world", "!"]);
        assert_eq!(bleu_tokens("سلام، دنیا؟"), vec!["سلام", "،", "دنیا", "؟"]);
    }

    #[test]
    fn identity_and_empty() {
        let refs = ["the cat sat on the mat", "a dog ran in the park today"];
        assert_eq!(bleu(&refs, &refs).unwrap(), 1.0);
        assert_eq!(bleu(&["", ""], &refs).unwrap(), 0.0);
        assert!(matches!(bleu(&["x"], &[""]), Err(EvalError::EmptyReference(0))));
    }
}
