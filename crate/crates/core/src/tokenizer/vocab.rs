use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TokenizerError;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

/// Marker that stands in for a space inside token text.
pub const SPACE_MARK: char = '\u{2581}';

const SPECIALS: [&str; 5] = [PAD, BOS, EOS, SEP, "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Base,
    New,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::Base => "base",
            Provenance::New => "new",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Byte(u8),
    Normal,
}

pub fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

/// Special and byte tokens are never produced by matching text.
pub fn token_kind(text: &str) -> TokenKind {
    if SPECIALS.contains(&text) {
        return TokenKind::Special;
    }
    if text.len() == 6 && text.starts_with("<0x") && text.ends_with('>') {
        if let Ok(b) = u8::from_str_radix(&text[3..5], 16) {
            if byte_token(b) == text {
                return TokenKind::Byte(b);
            }
        }
    }
    TokenKind::Normal
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub text: String,
    pub score: f64,
    pub id: u32,
    pub provenance: Provenance,
}

/// Ordered token table. Ids are dense `0..N` and token strings unique.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<Token>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Vocabulary {
    pub fn empty() -> Self {
        Vocabulary { entries: Vec::new(), index: HashMap::new() }
    }

    /// Builds a vocabulary from `(text, score, provenance)` in id order.
    pub fn from_tokens<I>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = (String, f64, Provenance)>,
    {
        let mut v = Vocabulary::empty();
        for (text, score, provenance) in tokens {
            v.push(text, score, provenance)?;
        }
        Ok(v)
    }

    pub(crate) fn push(&mut self, text: String, score: f64, provenance: Provenance) -> Result<u32, TokenizerError> {
        if text.is_empty() {
            return Err(TokenizerError::Invalid("empty token text".into()));
        }
        if self.index.contains_key(&text) {
            return Err(TokenizerError::Duplicate(text));
        }
        let id = self.entries.len() as u32;
        self.index.insert(text.clone(), id);
        self.entries.push(Token { text, score, id, provenance });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Token> {
        self.entries.get(id as usize)
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.index.get(text).copied()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.index.contains_key(text)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Token> {
        self.entries.iter()
    }

    pub fn pad_id(&self) -> Option<u32> {
        self.id_of(PAD)
    }

    pub fn bos_id(&self) -> Option<u32> {
        self.id_of(BOS)
    }

    pub fn eos_id(&self) -> Option<u32> {
        self.id_of(EOS)
    }

    pub fn sep_id(&self) -> Option<u32> {
        self.id_of(SEP)
    }

    pub fn special_id(&self, text: &str) -> Result<u32, TokenizerError> {
        self.id_of(text).ok_or_else(|| TokenizerError::MissingSpecial(text.to_string()))
    }

    /// True when all 256 byte tokens are present.
    pub fn byte_fallback(&self) -> bool {
        (0..=255u8).all(|b| self.index.contains_key(&byte_token(b)))
    }

    pub fn count_provenance(&self, p: Provenance) -> usize {
        self.entries.iter().filter(|t| t.provenance == p).count()
    }

    /// Appends reserved tokens that are not yet present, tagged as new.
    /// Returns the vocabulary and how many were added.
    pub fn with_reserved(&self, tokens: &[&str]) -> (Vocabulary, usize) {
        let mut v = self.clone();
        let mut added = 0;
        for t in tokens {
            if !v.contains(t) {
                v.push(t.to_string(), 0.0, Provenance::New).expect("absent token");
                added += 1;
            }
        }
        (v, added)
    }

    /// One line per token: `text \t score \t id \t provenance`, with
    /// backslash, tab, newline and carriage return escaped in the text.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", escape(&t.text), t.score, t.id, t.provenance.as_str());
        }
        out
    }

    pub fn from_tsv(s: &str) -> Result<Self, TokenizerError> {
        let mut v = Vocabulary::empty();
        for (lineno, line) in s.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse = |msg: String| TokenizerError::Parse { line: lineno + 1, msg };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(parse(format!("expected 4 columns, found {}", cols.len())));
            }
            let text = unescape(cols[0]).map_err(parse)?;
            let score: f64 = cols[1].parse().map_err(|e| parse(format!("score: {e}")))?;
            let id: u32 = cols[2].parse().map_err(|e| parse(format!("id: {e}")))?;
            let provenance = match cols[3] {
                "base" => Provenance::Base,
                "new" => Provenance::New,
                other => return Err(parse(format!("unknown provenance `{other}`"))),
            };
            if id as usize != v.len() {
                return Err(parse(format!("id {id} out of order, expected {}", v.len())));
            }
            v.push(text, score, provenance).map_err(|e| parse(e.to_string()))?;
        }
        Ok(v)
    }

    /// SHA-256 of the TSV rendering, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds() {
        assert_eq!(token_kind("<0x0A>"), TokenKind::Byte(10));
        assert_eq!(token_kind("<0x0a>"), TokenKind::Normal);
        assert_eq!(token_kind(BOS), TokenKind::Special);
        assert_eq!(token_kind("ab"), TokenKind::Normal);
    }

    #[test]
    fn tsv_roundtrip_with_escapes() {
        let v = Vocabulary::from_tokens([
            ("<pad>".to_string(), 0.0, Provenance::Base),
            ("a\tb".to_string(), -1.5, Provenance::Base),
            ("\\n".to_string(), -2.0, Provenance::New),
            ("\n".to_string(), 0.0, Provenance::New),
        ])
        .unwrap();
        let back = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
    }

    #[test]
    fn rejects_duplicates_and_gaps() {
        assert!(matches!(
            Vocabulary::from_tokens([("a".into(), 0.0, Provenance::Base), ("a".into(), 0.0, Provenance::Base)]),
            Err(TokenizerError::Duplicate(_))
        ));
        assert!(Vocabulary::from_tsv("a\t0\t1\tbase\n").is_err());
    }

    #[test]
    fn reserved_tokens_append_once() {
        let v = Vocabulary::from_tokens([("a".into(), 0.0, Provenance::Base)]).unwrap();
        let (v2, n) = v.with_reserved(&[SEP]);
        assert_eq!((v2.len(), n), (2, 1));
        let (v3, n) = v2.with_reserved(&[SEP]);
        assert_eq!((v3.len(), n), (2, 0));
    }
}
