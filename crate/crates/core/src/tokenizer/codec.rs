use std::collections::HashMap;

use super::vocab::{token_kind, TokenKind, SPACE_MARK};
use super::{TokenizerError, Vocabulary};

/// Greedy longest-match encoder over the normal tokens of a vocabulary,
/// with byte fallback for characters no token covers.
///
/// Spaces are matched as [`SPACE_MARK`]. A literal `▁` in the input is
/// always byte-encoded so decoding can map every mark back to a space.
#[derive(Debug, Clone)]
pub struct Codec<'v> {
    vocab: &'v Vocabulary,
    nodes: Vec<Node>,
    bytes: Option<[u32; 256]>,
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: HashMap<char, usize>,
    token: Option<u32>,
}

impl<'v> Codec<'v> {
    pub fn new(vocab: &'v Vocabulary) -> Self {
        let mut nodes = vec![Node::default()];
        for t in vocab.iter() {
            if token_kind(&t.text) != TokenKind::Normal {
                continue;
            }
            let mut cur = 0;
            for c in t.text.chars() {
                cur = match nodes[cur].children.get(&c) {
                    Some(&n) => n,
                    None => {
                        nodes.push(Node::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(c, n);
                        n
                    }
                };
            }
            nodes[cur].token = Some(t.id);
        }
        let bytes = vocab.byte_fallback().then(|| {
            let mut ids = [0u32; 256];
            for (b, slot) in ids.iter_mut().enumerate() {
                *slot = vocab.id_of(&super::vocab::byte_token(b as u8)).expect("byte fallback");
            }
            ids
        });
        Codec { vocab, nodes, bytes }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            let mut best: Option<(u32, usize)> = None;
            if chars[i] != SPACE_MARK {
                let mut cur = 0;
                let mut j = i;
                while j < chars.len() {
                    let c = match chars[j] {
                        ' ' => SPACE_MARK,
                        SPACE_MARK => break,
                        c => c,
                    };
                    match self.nodes[cur].children.get(&c) {
                        Some(&n) => cur = n,
                        None => break,
                    }
                    j += 1;
                    if let Some(id) = self.nodes[cur].token {
                        best = Some((id, j));
                    }
                }
            }
            match best {
                Some((id, end)) => {
                    out.push(id);
                    i = end;
                }
                None => {
                    let table = self.bytes.as_ref().ok_or(TokenizerError::Unencodable { ch: chars[i], position: i })?;
                    let mut buf = [0u8; 4];
                    out.extend(chars[i].encode_utf8(&mut buf).bytes().map(|b| table[b as usize]));
                    i += 1;
                }
            }
        }
        Ok(out)
    }

    /// Decodes ids to text. Special tokens render as their literal text;
    /// byte runs are reassembled as UTF-8 (lossily if malformed).
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        self.decode_impl(ids, false)
    }

    /// Like [`Codec::decode`] but drops special tokens.
    pub fn decode_skip_special(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        self.decode_impl(ids, true)
    }

    fn decode_impl(&self, ids: &[u32], skip_special: bool) -> Result<String, TokenizerError> {
        let mut out: Vec<u8> = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let tok = self.vocab.get(id).ok_or(TokenizerError::UnknownId(id))?;
            match token_kind(&tok.text) {
                TokenKind::Byte(b) => out.push(b),
                TokenKind::Special if skip_special => {}
                TokenKind::Special => out.extend_from_slice(tok.text.as_bytes()),
                TokenKind::Normal => {
                    for c in tok.text.chars() {
                        let c = if c == SPACE_MARK { ' ' } else { c };
                        let mut buf = [0u8; 4];
                        out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(String::from_utf8(out).unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned()))
    }
}
