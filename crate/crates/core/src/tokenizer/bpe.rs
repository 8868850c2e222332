use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{byte_token, token_kind, Provenance, TokenKind, BOS, EOS, PAD, SPACE_MARK};
use super::{TokenizerError, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub target_size: usize,
    #[serde(default = "yes")]
    pub byte_fallback: bool,
    /// Train on a seeded random subset of sentences totalling at most this
    /// many bytes.
    #[serde(default)]
    pub sample_bytes: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_specials")]
    pub special_tokens: Vec<String>,
}

fn yes() -> bool {
    true
}

fn default_specials() -> Vec<String> {
    vec![PAD.into(), BOS.into(), EOS.into()]
}

impl TrainerConfig {
    pub fn new(target_size: usize) -> Self {
        TrainerConfig {
            target_size,
            byte_fallback: true,
            sample_bytes: None,
            seed: 0,
            special_tokens: default_specials(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub vocab: Vocabulary,
    /// Size of the initial symbol set (specials, bytes, characters).
    pub alphabet_size: usize,
    pub merges: usize,
    /// False when the corpus ran out of pairs before `target_size`.
    pub reached_target: bool,
}

/// Splits text into pre-tokens: each is a run of spaces (rendered as `▁`)
/// followed by a run of non-space characters.
pub(crate) fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c == ' ' {
            if in_word {
                out.push(std::mem::take(&mut cur));
                in_word = false;
            }
            cur.push(SPACE_MARK);
        } else {
            in_word = true;
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Seeded uniform subset of sentences within a byte budget, in corpus order.
pub fn sample_by_bytes<S: AsRef<str>>(corpus: &[S], budget: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(u64, usize)> = (0..corpus.len()).map(|i| (rng.random(), i)).collect();
    keyed.sort_unstable();
    let mut used = 0;
    let mut picked = Vec::new();
    for (_, i) in keyed {
        let n = corpus[i].as_ref().len();
        if used + n > budget {
            continue;
        }
        used += n;
        picked.push(i);
    }
    picked.sort_unstable();
    picked
}

/// Trains a byte-fallback BPE vocabulary.
///
/// The initial symbols are the special tokens, the 256 byte tokens (when
/// enabled) and every distinct character of the corpus. Merges then pick the
/// most frequent adjacent pair, breaking ties by the lexicographically
/// smallest `(left, right)`. A merge's score is minus its rank.
pub fn train_subword<S: AsRef<str>>(corpus: &[S], cfg: &TrainerConfig) -> Result<TrainOutcome, TokenizerError> {
    let selected: Vec<&str> = match cfg.sample_bytes {
        Some(budget) => sample_by_bytes(corpus, budget, cfg.seed).into_iter().map(|i| corpus[i].as_ref()).collect(),
        None => corpus.iter().map(AsRef::as_ref).collect(),
    };
    if selected.iter().all(|s| s.is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for s in &selected {
        for w in pre_tokenize(s) {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    let chars: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();

    let mut vocab = Vocabulary::empty();
    for s in &cfg.special_tokens {
        vocab.push(s.clone(), 0.0, Provenance::Base)?;
    }
    if cfg.byte_fallback {
        for b in 0..=255u8 {
            vocab.push(byte_token(b), 0.0, Provenance::Base)?;
        }
    }
    for &c in &chars {
        let s = c.to_string();
        if !vocab.contains(&s) {
            vocab.push(s, 0.0, Provenance::Base)?;
        }
    }
    let alphabet_size = vocab.len();
    if cfg.target_size < alphabet_size {
        return Err(TokenizerError::TargetBelowAlphabet { target: cfg.target_size, alphabet: alphabet_size });
    }

    // symbol strings are vocabulary ids; words are id sequences
    let sym = |v: &Vocabulary, s: &str| v.id_of(s).expect("alphabet symbol");
    let mut words: Vec<(Vec<u32>, u64)> = word_freq
        .iter()
        .map(|(w, &f)| (w.chars().map(|c| sym(&vocab, &c.to_string())).collect(), f))
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (w, f)) in words.iter().enumerate() {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += *f as i64;
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut banned: HashSet<(u32, u32)> = HashSet::new();
    let mut merges = 0;
    while vocab.len() < cfg.target_size {
        let text = |id: u32| vocab.get(id).expect("symbol").text.as_str();
        let best = pair_counts
            .iter()
            .filter(|(p, &c)| c > 0 && !banned.contains(p))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb)
                    .then_with(|| (text(pb.0), text(pb.1)).cmp(&(text(pa.0), text(pa.1))))
            })
            .map(|(p, _)| *p);
        let Some((left, right)) = best else { break };
        let merged = format!("{}{}", text(left), text(right));
        if token_kind(&merged) != TokenKind::Normal {
            banned.insert((left, right));
            continue;
        }
        let new_id = match vocab.id_of(&merged) {
            Some(id) => id,
            None => {
                merges += 1;
                vocab.push(merged, -(merges as f64), Provenance::Base)?
            }
        };

        let affected: Vec<usize> = {
            let mut v: Vec<usize> = where_.remove(&(left, right)).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        for wi in affected {
            let (w, f) = &mut words[wi];
            let f = *f as i64;
            for p in w.windows(2) {
                *pair_counts.get_mut(&(p[0], p[1])).expect("counted") -= f;
            }
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == left && w[i + 1] == right {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += f;
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    let reached_target = vocab.len() == cfg.target_size;
    Ok(TrainOutcome { vocab, alphabet_size, merges, reached_target })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(target: usize) -> TrainerConfig {
        TrainerConfig { byte_fallback: false, special_tokens: vec![], ..TrainerConfig::new(target) }
    }

    #[test]
    fn pre_tokens_keep_leading_spaces() {
        assert_eq!(pre_tokenize("ab  cd e"), vec!["ab", "\u{2581}\u{2581}cd", "\u{2581}e"]);
        assert_eq!(pre_tokenize(" x "), vec!["\u{2581}x", "\u{2581}"]);
    }

    #[test]
    fn abab_merges_by_hand() {
        // words: "abab" ×1, "▁abab" ×1 ; alphabet {a, b, ▁}
        // pair counts: (a,b)=4, (b,a)=2, (▁,a)=1 → merge "ab"
        // then (ab,ab)=2, (▁,ab)=1 → merge "abab"
        // then (▁,abab)=1 → merge "▁abab"
        let out = train_subword(&["abab abab"], &plain(6)).unwrap();
        let texts: Vec<&str> = out.vocab.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "b", "\u{2581}", "ab", "abab", "\u{2581}abab"]);
        assert_eq!(out.alphabet_size, 3);
        assert_eq!(out.merges, 3);
        assert!(out.reached_target);
    }

    #[test]
    fn target_equal_alphabet_means_no_merges() {
        let out = train_subword(&["abab abab"], &plain(3)).unwrap();
        assert_eq!(out.merges, 0);
        assert_eq!(out.vocab.len(), 3);
    }

    #[test]
    fn target_below_alphabet_names_both() {
        let err = train_subword(&["abc"], &plain(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(train_subword::<&str>(&[], &plain(5)), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(train_subword(&[""], &plain(5)), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn stops_when_pairs_run_out() {
        let out = train_subword(&["ab"], &plain(50)).unwrap();
        assert!(!out.reached_target);
        assert_eq!(out.vocab.len(), 3);
    }

    #[test]
    fn byte_fallback_alphabet() {
        let out = train_subword(&["ab"], &TrainerConfig::new(3 + 256 + 2)).unwrap();
        assert!(out.vocab.byte_fallback());
        assert_eq!(out.alphabet_size, 3 + 256 + 2);
    }

    #[test]
    fn sampling_respects_budget_and_seed() {
        let corpus: Vec<String> = (0..100).map(|i| format!("sentence number {i}")).collect();
        let a = sample_by_bytes(&corpus, 300, 1);
        let b = sample_by_bytes(&corpus, 300, 1);
        let c = sample_by_bytes(&corpus, 300, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().map(|&i| corpus[i].len()).sum::<usize>() <= 300);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
