use super::CorpusError;

const TERMINALS: [char; 7] = ['.', '!', '?', '\u{203D}', '\u{061F}', '\u{06D4}', '\n'];

pub fn is_terminal(c: char) -> bool {
    TERMINALS.contains(&c)
}

/// Splits text after each run of terminal punctuation. Pieces are trimmed
/// and empty pieces dropped; the terminal run stays with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !is_terminal(c) {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(&(j, d)) = chars.peek() {
            if !is_terminal(d) {
                break;
            }
            end = j + d.len_utf8();
            chars.next();
        }
        push_trimmed(&mut out, &text[start..end]);
        start = end;
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let t = piece.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

/// [`split_sentences`] over raw bytes, rejecting malformed UTF-8.
pub fn split_sentences_bytes(bytes: &[u8]) -> Result<Vec<String>, CorpusError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::InvalidUtf8 { offset: e.valid_up_to() })?;
    Ok(split_sentences(text))
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_clauses() {
        assert_eq!(split_sentences("A B. C D."), vec!["A B.", "C D."]);
    }

    #[test]
    fn empty_and_blank() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences(" \n\n . ").len() == 1);
    }

    #[test]
    fn punctuation_runs_stay_attached() {
        assert_eq!(split_sentences("Really?! Yes... ok"), vec!["Really?!", "Yes...", "ok"]);
        assert_eq!(split_sentences("چرا؟ چون۔\nبله"), vec!["چرا؟", "چون۔", "بله"]);
    }

    #[test]
    fn bad_utf8_names_offset() {
        let err = split_sentences_bytes(b"ab. c\xff").unwrap_err();
        assert!(matches!(err, CorpusError::InvalidUtf8 { offset: 5 }));
    }

    #[test]
    fn words_are_whitespace_runs() {
        assert_eq!(word_count("  a\tb  c\n"), 3);
        assert_eq!(word_count(""), 0);
    }
}
