use unicode_normalization::UnicodeNormalization;

/// Punctuation for label parsing and BLEU tokenization: ASCII punctuation,
/// the general punctuation block (zero-width joiners excluded), Arabic-script
/// marks and common quotes.
pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}')
        || matches!(c, '\u{3001}'..='\u{3003}' | '\u{3008}'..='\u{3011}')
        || matches!(
            c,
            '¡' | '¿' | '«' | '»' | '·' | '§' | '¶' | '،' | '؛' | '؟' | '۔' | '٪' | '٫' | '٬' | '٭'
        )
}

/// NFC, lowercase, punctuation replaced by spaces, whitespace collapsed.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.nfc().flat_map(char::to_lowercase).collect();
    let spaced: String = lowered.chars().map(|c| if is_punct(c) { ' ' } else { c }).collect();
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Byte offsets in `hay` where `needle` occurs as whole words. Both are
/// expected to be normalized.
fn word_matches(hay: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    // in the padded string, a match at `i` starts at byte `i` of `hay`
    let padded = format!(" {hay} ");
    let pat = format!(" {needle} ");
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(i) = padded[from..].find(&pat) {
        out.push(from + i);
        from += i + 1;
    }
    out
}

/// Removes whole-word occurrences of each echo string, longest first.
fn strip_echoes(hay: &str, echoes: &[String]) -> String {
    let mut cur = hay.to_string();
    let mut sorted: Vec<&String> = echoes.iter().filter(|e| !e.is_empty()).collect();
    sorted.sort_by_key(|e| std::cmp::Reverse(e.len()));
    for e in sorted {
        while let Some(&i) = word_matches(&cur, e).first() {
            let joined = format!("{} {}", &cur[..i], &cur[i + e.len()..]);
            cur = joined.split_whitespace().collect::<Vec<_>>().join(" ");
        }
    }
    cur
}

/// Picks the label whose normalized form occurs earliest, as whole words,
/// in the normalized generation. Ties at the same offset go to the longer
/// label. Text that echoes the prompt fields (`echoes`) is removed first, so
/// a generation that only repeats the input parses to `None`.
pub fn parse_label(generation: &str, labels: &[String], echoes: &[&str]) -> Option<usize> {
    let echo_norm: Vec<String> = echoes.iter().map(|e| normalize(e)).collect();
    let hay = strip_echoes(&normalize(generation), &echo_norm);
    let mut best: Option<(usize, usize, usize)> = None;
    for (li, l) in labels.iter().enumerate() {
        let n = normalize(l);
        if let Some(&pos) = word_matches(&hay, &n).first() {
            let better = match best {
                None => true,
                Some((bp, blen, _)) => pos < bp || (pos == bp && n.len() > blen),
            };
            if better {
                best = Some((pos, n.len(), li));
            }
        }
    }
    best.map(|b| b.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("  The ANSWER is: Positive!! "), "the answer is positive");
        assert_eq!(normalize("«مثبت»،"), "مثبت");
        assert_eq!(normalize("cafe\u{301}"), "caf\u{e9}");
    }

    #[test]
    fn substring_parse() {
        let l = labels(&["positive", "negative"]);
        assert_eq!(parse_label("The answer is: positive", &l, &[]), Some(0));
        assert_eq!(parse_label("nothing useful", &l, &[]), None);
    }

    #[test]
    fn earliest_wins_then_longer() {
        let l = labels(&["positive", "negative"]);
        assert_eq!(parse_label("negative, not positive", &l, &[]), Some(1));
        let l = labels(&["not", "not entailed"]);
        assert_eq!(parse_label("not entailed", &l, &[]), Some(1));
    }

    #[test]
    fn word_boundaries() {
        let l = labels(&["no", "yes"]);
        assert_eq!(parse_label("nothing known", &l, &[]), None);
        assert_eq!(parse_label("No.", &l, &[]), Some(0));
    }

    #[test]
    fn echoed_input_is_a_refusal() {
        let l = labels(&["positive", "negative"]);
        let input = "Is this review positive or negative? Great film.";
        assert_eq!(parse_label(input, &l, &[input]), None);
        assert_eq!(parse_label(&format!("{input} positive"), &l, &[input]), Some(0));
    }
}
