//! Fixed vocabulary tokenizer, step splitter and prompt templates.
//!
//! Tokenization is character level, except for a handful of fixed template
//! phrases that are single symbols. Encoding is greedy longest match over the
//! symbol list, so `decode(encode(t)) == t` for any text made of symbols.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{Problem, StepSolution};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const SEP: u32 = 3;
pub const MAX_VOCAB: usize = 96;

pub const HEADER: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.";
pub const INSTRUCTION_TAG: &str = "### Instruction:";
pub const INPUT_TAG: &str = "### Input:";
pub const RESPONSE_TAG: &str = "### Response:";
pub const LOCATE_INSTRUCTION: &str = "Given the problem, correct solution and the prediction from language models. The method in prediction might be different with correct solution, but it is also correct. You need to identify which step of the prediction is the first wrong step, and write down the label of the first wrong step. If the prediction is correct, you need to write down correct.";
pub const REWRITE_INSTRUCTION: &str = "Given the problem and the correct solution, you need to correct the mistakes in prediction to get the correct answer. You should make minimal modifications.";
pub const PROBLEM_LABEL: &str = "Problem: ";
pub const SOLUTION_LABEL: &str = "Correct solution: ";
pub const PREDICTION_LABEL: &str = "Prediction: ";
pub const REWRITE_MARKER: &str = "Correct prediction:";
pub const LOCATE_ANSWER: &str = "The first error step is ";
pub const LOCATE_CORRECT: &str = "correct";
pub const COT_CUE: &str = "Let's think step by step.";

const SPECIALS: [&str; 4] = ["<BOS>", "<EOS>", "<PAD>", "<SEP>"];
const PHRASES: [&str; 14] = [
    HEADER,
    INSTRUCTION_TAG,
    INPUT_TAG,
    RESPONSE_TAG,
    LOCATE_INSTRUCTION,
    REWRITE_INSTRUCTION,
    PROBLEM_LABEL,
    SOLUTION_LABEL,
    PREDICTION_LABEL,
    REWRITE_MARKER,
    LOCATE_ANSWER,
    COT_CUE,
    crate::synth::ANSWER_PREFIX,
    "Step ",
];
const PUNCT: &str = " .?,:[]+-*=\n'()";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    OutOfVocab { ch: char, offset: usize },
    #[error("token id {0} is outside the vocabulary")]
    BadId(u32),
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("vocabulary io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
    /// Symbol ids ordered by descending byte length, for longest match.
    by_len: Vec<u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        symbols.extend(PHRASES.iter().map(|s| s.to_string()));
        symbols.extend(('0'..='9').map(String::from));
        symbols.extend(('a'..='z').map(String::from));
        symbols.extend(('A'..='Z').map(String::from));
        symbols.extend(PUNCT.chars().map(String::from));
        Vocab::from_symbols(symbols).expect("built-in vocabulary is valid")
    }
}

impl Vocab {
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self, CodecError> {
        if symbols.len() > MAX_VOCAB {
            return Err(CodecError::BadVocab(format!("{} symbols > {MAX_VOCAB}", symbols.len())));
        }
        if symbols.len() < 4 || symbols[..4] != SPECIALS.map(String::from) {
            return Err(CodecError::BadVocab("special tokens must occupy ids 0-3".into()));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(CodecError::BadVocab("empty symbol".into()));
            }
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(CodecError::BadVocab(format!("duplicate symbol {s:?}")));
            }
        }
        let mut by_len: Vec<u32> = (0..symbols.len() as u32).collect();
        by_len.sort_by_key(|&i| std::cmp::Reverse(symbols[i as usize].len()));
        Ok(Vocab { symbols, index, by_len })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, CodecError> {
        let mut out = Vec::with_capacity(text.len());
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let hit = self.by_len.iter().find(|&&id| rest.starts_with(self.symbols[id as usize].as_str()));
            match hit {
                Some(&id) => {
                    out.push(id);
                    pos += self.symbols[id as usize].len();
                }
                None => {
                    let ch = rest.chars().next().unwrap_or('\0');
                    return Err(CodecError::OutOfVocab { ch, offset: pos });
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, CodecError> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.symbols.get(id as usize).ok_or(CodecError::BadId(id))?);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.symbols).expect("strings serialize")
    }

    pub fn from_json(json: &str) -> Result<Self, CodecError> {
        let symbols: Vec<String> = serde_json::from_str(json).map_err(|e| CodecError::BadVocab(e.to_string()))?;
        Self::from_symbols(symbols)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        std::fs::write(path, self.to_json()).map_err(|e| CodecError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let s = std::fs::read_to_string(path).map_err(|e| CodecError::Io(e.to_string()))?;
        Self::from_json(&s)
    }
}

/// Splits after every `.` or `?`, keeping the delimiter with its step. A
/// trailing fragment without a delimiter is kept as the last element.
pub fn split_steps(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == '.' || c == '?' {
            out.push(text[start..=i].to_string());
            start = i + 1;
        }
    }
    if start < text.len() {
        out.push(text[start..].to_string());
    }
    out
}

/// "[k] step" lines, one per indexed step (the answer line included).
pub fn indexed_solution(sol: &StepSolution) -> String {
    sol.indexed_steps().iter().enumerate().map(|(k, s)| format!("[{k}] {s}")).collect::<Vec<_>>().join("\n")
}

fn wrap(instruction: &str, input: Option<&str>) -> String {
    let mut out = format!("{HEADER}\n{INSTRUCTION_TAG}\n{instruction}\n\n");
    if let Some(input) = input {
        out.push_str(&format!("{INPUT_TAG}\n{input}\n\n"));
    }
    out.push_str(RESPONSE_TAG);
    out.push('\n');
    out
}

pub fn format_locating_prompt(q: &Problem, s: &StepSolution, pred: &StepSolution) -> String {
    let input = format!(
        "{PROBLEM_LABEL}{}\n{SOLUTION_LABEL}\n{}\n{PREDICTION_LABEL}\n{}",
        q.question,
        indexed_solution(s),
        indexed_solution(pred)
    );
    wrap(LOCATE_INSTRUCTION, Some(&input))
}

/// Target completion for the locating prompt.
pub fn locating_target(first_error: Option<usize>) -> String {
    match first_error {
        Some(k) => format!("{LOCATE_ANSWER}[{k}]"),
        None => LOCATE_CORRECT.to_string(),
    }
}

/// Parses a locating completion: `Some(Some(k))` for "[k]", `Some(None)` for
/// "correct", `None` when neither form is present.
pub fn parse_locating_target(text: &str) -> Option<Option<usize>> {
    let t = text.trim();
    if t == LOCATE_CORRECT {
        return Some(None);
    }
    let rest = t.strip_prefix(LOCATE_ANSWER.trim_end())?.trim_start();
    let inner = rest.strip_prefix('[')?.strip_suffix(']')?;
    inner.parse().ok().map(Some)
}

/// The rewrite prompt ends with the fixed marker and a newline; the response
/// span (the rewritten solution) starts right after it.
pub fn format_rewrite_prompt(q: &Problem, s: &StepSolution, pred: &StepSolution) -> String {
    format_rewrite_prompt_text(q, s, &pred.render())
}

pub fn format_rewrite_prompt_text(q: &Problem, s: &StepSolution, pred_text: &str) -> String {
    let input =
        format!("{PROBLEM_LABEL}{}\n{SOLUTION_LABEL}{}\n{PREDICTION_LABEL}{}", q.question, s.render(), pred_text);
    let mut out = wrap(REWRITE_INSTRUCTION, Some(&input));
    out.push_str(REWRITE_MARKER);
    out.push('\n');
    out
}

pub fn format_policy_prompt(q: &Problem) -> String {
    let mut out = wrap(&q.question, None);
    out.push_str(COT_CUE);
    out.push('\n');
    out
}

/// A prompt/target pair encoded once, with the offset of the first trainable
/// token. `tokens` is `<BOS> prompt target <EOS>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub tokens: Vec<u32>,
    pub response_start: usize,
}

impl Encoded {
    pub fn new(vocab: &Vocab, prompt: &str, target: &str) -> Result<Self, CodecError> {
        let mut tokens = vec![BOS];
        tokens.extend(vocab.encode(prompt)?);
        let response_start = tokens.len();
        tokens.extend(vocab.encode(target)?);
        tokens.push(EOS);
        Ok(Encoded { tokens, response_start })
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.response_start]
    }

    pub fn response(&self) -> &[u32] {
        &self.tokens[self.response_start..]
    }
}

/// `<BOS>` followed by the encoded prompt.
pub fn encode_prompt(vocab: &Vocab, prompt: &str) -> Result<Vec<u32>, CodecError> {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(prompt)?);
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_solution, Family, Op};

    fn example() -> Problem {
        Problem::new("ex", Family::ArithSeen, vec![3, 5, 2], vec![Op::Add, Op::Mul]).unwrap()
    }

    #[test]
    fn vocab_shape() {
        let v = Vocab::default();
        assert!(v.size() <= MAX_VOCAB);
        assert_eq!(v.id("<BOS>"), Some(BOS));
        assert_eq!(v.id("<EOS>"), Some(EOS));
        assert_eq!(v.id("<PAD>"), Some(PAD));
        assert_eq!(v.id("<SEP>"), Some(SEP));
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::default();
        assert!(v.encode("").unwrap().is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
        let ids = v.encode("3 + 5 = 8.").unwrap();
        assert_eq!(ids.len(), 10);
        assert_eq!(v.decode(&ids).unwrap(), "3 + 5 = 8.");
    }

    #[test]
    fn out_of_vocab_reports_offset() {
        let v = Vocab::default();
        assert_eq!(v.encode("ab%c"), Err(CodecError::OutOfVocab { ch: '%', offset: 2 }));
        assert_eq!(v.decode(&[999]), Err(CodecError::BadId(999)));
    }

    #[test]
    fn bad_vocab_rejected() {
        assert!(Vocab::from_symbols(vec!["a".into()]).is_err());
        let mut syms: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        syms.push("x".into());
        syms.push("x".into());
        assert!(Vocab::from_symbols(syms).is_err());
    }

    #[test]
    fn phrases_are_single_tokens() {
        let v = Vocab::default();
        assert_eq!(v.encode(HEADER).unwrap().len(), 1);
        assert_eq!(v.encode("The answer is 16").unwrap().len(), 3);
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_steps("A. B? C"), vec!["A.", " B?", " C"]);
        assert!(split_steps("").is_empty());
    }

    #[test]
    fn locating_prompt_shape() {
        let p = example();
        let s = render_solution(&p);
        let prompt = format_locating_prompt(&p, &s, &s);
        assert!(prompt.contains("[0] Step 1: 3 + 5 = 8."));
        assert!(prompt.contains("[1] Step 2: 8 * 2 = 16."));
        assert!(prompt.contains("[2] The answer is 16"));
        assert!(prompt.contains(INSTRUCTION_TAG) && prompt.contains(INPUT_TAG));
        assert!(prompt.ends_with("### Response:\n"));
        assert_eq!(prompt, format_locating_prompt(&p, &s, &s));
        assert_eq!(locating_target(None), "correct");
        assert!(prompt.contains("you need to write down correct"));
    }

    #[test]
    fn locating_target_parse() {
        assert_eq!(parse_locating_target("The first error step is [3]"), Some(Some(3)));
        assert_eq!(parse_locating_target(&locating_target(Some(0))), Some(Some(0)));
        assert_eq!(parse_locating_target("correct"), Some(None));
        assert_eq!(parse_locating_target("The first error step is [x]"), None);
        assert_eq!(parse_locating_target("nonsense"), None);
    }

    #[test]
    fn rewrite_prompt_shape() {
        let v = Vocab::default();
        let p = example();
        let s = render_solution(&p);
        let prompt = format_rewrite_prompt(&p, &s, &s);
        assert!(prompt.ends_with(&format!("{REWRITE_MARKER}\n")));
        assert!(prompt.contains("You should make minimal modifications"));
        let enc = Encoded::new(&v, &prompt, &s.render()).unwrap();
        let prompt_ids = encode_prompt(&v, &prompt).unwrap();
        assert_eq!(enc.response_start, prompt_ids.len());
        assert_eq!(enc.prompt(), &prompt_ids[..]);
        let mut target_ids = v.encode(&s.render()).unwrap();
        target_ids.push(EOS);
        assert_eq!(enc.response(), &target_ids[..]);
    }

    #[test]
    fn policy_prompt_cue() {
        let p = example();
        let prompt = format_policy_prompt(&p);
        assert!(prompt.trim_end().ends_with("Let's think step by step."));
        assert!(prompt.contains(&p.question));
        assert_eq!(prompt, format_policy_prompt(&p));
    }
}
