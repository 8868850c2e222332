use serde::{Deserialize, Serialize};

use crate::tokenizer::{Codec, BOS, EOS, SEP};

use super::{BatchRow, TrainError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BilingualPair {
    /// Sentence in the new language.
    pub source: String,
    /// Its translation in the base language.
    pub target: String,
}

impl BilingualPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Result<Self, TrainError> {
        let p = BilingualPair { source: source.into(), target: target.into() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.source.trim().is_empty() || self.target.trim().is_empty() {
            return Err(TrainError::Data("bilingual pair with an empty side".into()));
        }
        Ok(())
    }
}

/// Reads `source \t target` lines; blank lines are skipped.
pub fn parse_parallel_tsv(text: &str) -> Result<Vec<BilingualPair>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (s, t) = line
            .split_once('\t')
            .ok_or_else(|| TrainError::Data(format!("line {}: expected `source<TAB>target`", i + 1)))?;
        out.push(BilingualPair::new(s, t).map_err(|e| TrainError::Data(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// New-language sentence first, base-language translation second.
    #[default]
    NewToBase,
    BaseToNew,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilingualLoss {
    /// Every predicted position, both halves.
    #[default]
    Both,
    /// Only the second half and the closing `<eos>`.
    SecondHalf,
}

/// `<bos> first <sep> second <eos>`. When too long the second half is cut
/// from the end and the row is flagged.
pub fn make_bilingual_sequence(
    pair: &BilingualPair,
    direction: Direction,
    codec: &Codec,
    max_len: usize,
    loss: BilingualLoss,
) -> Result<BatchRow, TrainError> {
    pair.validate()?;
    let v = codec.vocab();
    let (bos, sep, eos) = (v.special_id(BOS)?, v.special_id(SEP)?, v.special_id(EOS)?);
    let (first, second) = match direction {
        Direction::NewToBase => (&pair.source, &pair.target),
        Direction::BaseToNew => (&pair.target, &pair.source),
    };
    let a = codec.encode(first)?;
    let mut b = codec.encode(second)?;
    let fixed = 3 + a.len();
    if fixed + 1 > max_len {
        return Err(TrainError::Data(format!(
            "first half needs {} positions but the context holds {max_len}",
            fixed + 1
        )));
    }
    let truncated = fixed + b.len() > max_len;
    b.truncate(max_len - fixed);
    let mut ids = Vec::with_capacity(fixed + b.len());
    ids.push(bos);
    ids.extend(&a);
    ids.push(sep);
    let second_start = ids.len();
    ids.extend(&b);
    ids.push(eos);
    let loss_mask = (0..ids.len())
        .map(|t| match loss {
            BilingualLoss::Both => t > 0,
            BilingualLoss::SecondHalf => t >= second_start,
        })
        .collect();
    Ok(BatchRow { ids, loss_mask, truncated })
}

/// Packs encoded sentences as `<bos> s1 <eos> s2 <eos> …` into rows of at
/// most `max_len` tokens. Sentences longer than a row are cut and flagged.
pub fn pack_monolingual(sentences: &[Vec<u32>], bos: u32, eos: u32, max_len: usize) -> Vec<BatchRow> {
    let mut rows = Vec::new();
    let mut cur: Vec<u32> = Vec::new();
    let mut truncated = false;
    let flush = |cur: &mut Vec<u32>, truncated: &mut bool, rows: &mut Vec<BatchRow>| {
        if cur.len() > 1 {
            let mut r = BatchRow::fully_supervised(std::mem::take(cur));
            r.truncated = *truncated;
            rows.push(r);
        }
        cur.clear();
        *truncated = false;
    };
    for s in sentences {
        if s.is_empty() {
            continue;
        }
        let need = s.len() + 1;
        if cur.is_empty() {
            cur.push(bos);
        }
        if cur.len() + need > max_len && cur.len() > 1 {
            flush(&mut cur, &mut truncated, &mut rows);
            cur.push(bos);
        }
        if 1 + need > max_len {
            let keep = max_len.saturating_sub(2);
            cur.extend(&s[..keep]);
            cur.push(eos);
            truncated = true;
            flush(&mut cur, &mut truncated, &mut rows);
            continue;
        }
        cur.extend(s);
        cur.push(eos);
    }
    flush(&mut cur, &mut truncated, &mut rows);
    rows
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
    #[serde(default)]
    pub language: String,
    #[serde(default)]
    pub task: String,
    #[serde(default)]
    pub is_translation: bool,
}

impl InstructionExample {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.output.is_empty() {
            return Err(TrainError::Data("instruction example with an empty output".into()));
        }
        Ok(())
    }
}

pub fn parse_instructions_jsonl(text: &str) -> Result<Vec<InstructionExample>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: InstructionExample =
            serde_json::from_str(line).map_err(|e| TrainError::Data(format!("line {}: {e}", i + 1)))?;
        ex.validate().map_err(|e| TrainError::Data(format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub const INSTRUCTION_HEADER: &str = "### Instruction:\n";
pub const INPUT_HEADER: &str = "\n\n### Input:\n";
pub const RESPONSE_HEADER: &str = "\n\n### Response:\n";

/// The prompt shown to the model; the input block is left out when empty.
pub fn render_prompt(instruction: &str, input: &str) -> String {
    if input.is_empty() {
        format!("{INSTRUCTION_HEADER}{instruction}{RESPONSE_HEADER}")
    } else {
        format!("{INSTRUCTION_HEADER}{instruction}{INPUT_HEADER}{input}{RESPONSE_HEADER}")
    }
}

pub fn render_instruction(ex: &InstructionExample) -> String {
    render_prompt(&ex.instruction, &ex.input) + &ex.output
}

/// Encoded prompt pieces; the instruction and input are kept apart so they
/// can be shortened independently.
#[derive(Debug, Clone)]
pub struct PromptIds {
    pub header: Vec<u32>,
    pub instruction: Vec<u32>,
    pub input_header: Vec<u32>,
    pub input: Vec<u32>,
    pub response_header: Vec<u32>,
}

impl PromptIds {
    pub fn encode(codec: &Codec, instruction: &str, input: &str) -> Result<Self, TrainError> {
        let has_input = !input.is_empty();
        Ok(PromptIds {
            header: codec.encode(INSTRUCTION_HEADER)?,
            instruction: codec.encode(instruction)?,
            input_header: if has_input { codec.encode(INPUT_HEADER)? } else { Vec::new() },
            input: codec.encode(input)?,
            response_header: codec.encode(RESPONSE_HEADER)?,
        })
    }

    pub fn len(&self) -> usize {
        self.header.len() + self.instruction.len() + self.input_header.len() + self.input.len() + self.response_header.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops tokens from the end of the input, then of the instruction,
    /// until the prompt is at most `budget` long. Returns whether anything
    /// was removed, or `None` if the fixed parts alone exceed the budget.
    pub fn shrink_to(&mut self, budget: usize) -> Option<bool> {
        let fixed = self.header.len() + self.input_header.len() + self.response_header.len();
        if fixed > budget {
            return None;
        }
        let mut over = self.len().saturating_sub(budget);
        let cut = over > 0;
        let take = over.min(self.input.len());
        self.input.truncate(self.input.len() - take);
        over -= take;
        let take = over.min(self.instruction.len());
        self.instruction.truncate(self.instruction.len() - take);
        Some(cut)
    }

    pub fn ids(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.len());
        for part in [&self.header, &self.instruction, &self.input_header, &self.input, &self.response_header] {
            v.extend(part);
        }
        v
    }
}

/// `<bos> prompt response <eos>` with the loss on the response and `<eos>`.
pub fn format_instruction(ex: &InstructionExample, codec: &Codec, max_len: usize) -> Result<BatchRow, TrainError> {
    ex.validate()?;
    let v = codec.vocab();
    let (bos, eos) = (v.special_id(BOS)?, v.special_id(EOS)?);
    let response = codec.encode(&ex.output)?;
    let mut prompt = PromptIds::encode(codec, &ex.instruction, &ex.input)?;
    let budget = max_len
        .checked_sub(2 + response.len())
        .ok_or_else(|| TrainError::Data("response does not fit in the context".into()))?;
    let truncated = prompt
        .shrink_to(budget)
        .ok_or_else(|| TrainError::Data("response and template do not fit in the context".into()))?;
    let mut ids = vec![bos];
    ids.extend(prompt.ids());
    let start = ids.len();
    ids.extend(&response);
    ids.push(eos);
    let loss_mask = (0..ids.len()).map(|t| t >= start).collect();
    Ok(BatchRow { ids, loss_mask, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_subword, TrainerConfig};

    fn codec_vocab() -> crate::tokenizer::Vocabulary {
        let out = train_subword(&["hello world", "salam donya"], &TrainerConfig::new(280)).unwrap();
        out.vocab.with_reserved(&[SEP]).0
    }

    #[test]
    fn bilingual_layout_and_decode() {
        let v = codec_vocab();
        let c = Codec::new(&v);
        let row = make_bilingual_sequence(&BilingualPair::new("salam", "hello").unwrap(), Direction::NewToBase, &c, 64, BilingualLoss::Both)
            .unwrap();
        assert_eq!(c.decode(&row.ids).unwrap(), "<bos>salam<sep>hello<eos>");
        assert!(!row.loss_mask[0] && row.loss_mask[1..].iter().all(|&m| m));
        let rev = make_bilingual_sequence(&BilingualPair::new("salam", "hello").unwrap(), Direction::BaseToNew, &c, 64, BilingualLoss::SecondHalf)
            .unwrap();
        assert_eq!(c.decode(&rev.ids).unwrap(), "<bos>hello<sep>salam<eos>");
        let sep_at = rev.ids.iter().position(|&i| i == v.sep_id().unwrap()).unwrap();
        assert!(rev.loss_mask.iter().enumerate().all(|(t, &m)| m == (t > sep_at)));
    }

    #[test]
    fn bilingual_truncates_second_half() {
        let v = codec_vocab();
        let c = Codec::new(&v);
        let pair = BilingualPair::new("salam", "hello world hello world").unwrap();
        let full = make_bilingual_sequence(&pair, Direction::NewToBase, &c, 512, BilingualLoss::Both).unwrap();
        let cut = make_bilingual_sequence(&pair, Direction::NewToBase, &c, full.ids.len() - 2, BilingualLoss::Both).unwrap();
        assert!(!full.truncated && cut.truncated);
        assert_eq!(cut.ids.len(), full.ids.len() - 2);
        assert_eq!(*cut.ids.last().unwrap(), v.eos_id().unwrap());
        assert!(make_bilingual_sequence(&pair, Direction::NewToBase, &c, 3, BilingualLoss::Both).is_err());
    }

    #[test]
    fn empty_side_rejected() {
        assert!(BilingualPair::new("a", " ").is_err());
        assert!(parse_parallel_tsv("a\tb\n\nno tab\n").is_err());
        assert_eq!(parse_parallel_tsv("a\tb\n\nc\td\n").unwrap().len(), 2);
    }

    #[test]
    fn packing() {
        let rows = pack_monolingual(&[vec![5, 6], vec![7], vec![8, 9, 10, 11, 12, 13]], 1, 2, 6);
        assert_eq!(rows[0].ids, vec![1, 5, 6, 2, 7, 2]);
        assert_eq!(rows[1].ids, vec![1, 8, 9, 10, 11, 2]);
        assert!(!rows[0].truncated && rows[1].truncated);
    }

    fn ex(instruction: &str, input: &str, output: &str) -> InstructionExample {
        InstructionExample {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
            language: "en".into(),
            task: "t".into(),
            is_translation: false,
        }
    }

    #[test]
    fn empty_input_omits_block() {
        assert_eq!(render_instruction(&ex("Say hi", "", "hi")), "### Instruction:\nSay hi\n\n### Response:\nhi");
        assert!(render_instruction(&ex("Say hi", "x", "hi")).contains("### Input:\nx\n\n"));
    }

    #[test]
    fn loss_covers_response_only_and_truncation_order() {
        let v = codec_vocab();
        let c = Codec::new(&v);
        let e = ex("hello world", "salam donya salam", "hello");
        let row = format_instruction(&e, &c, 1024).unwrap();
        let resp = c.encode("hello").unwrap();
        let n = row.ids.len();
        let targets: Vec<usize> = (0..n).filter(|&t| row.loss_mask[t]).collect();
        assert_eq!(targets, (n - resp.len() - 1..n).collect::<Vec<_>>());
        assert_eq!(c.decode(&row.ids).unwrap(), format!("<bos>{}<eos>", render_instruction(&e)));

        let input_len = c.encode("salam donya salam").unwrap().len();
        let short = format_instruction(&e, &c, n - input_len).unwrap();
        assert!(short.truncated);
        let text = c.decode(&short.ids).unwrap();
        assert!(text.contains("### Instruction:\nhello world\n") && text.ends_with("hello<eos>"));
        let too_small = format_instruction(&e, &c, resp.len() + 3).unwrap_err();
        assert!(too_small.to_string().contains("fit"));
    }
}
