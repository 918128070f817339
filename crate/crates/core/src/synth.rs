//! Synthetic modular-arithmetic reasoning tasks.
//!
//! Every problem is a chain of binary operations over integers modulo 100.
//! The seen family folds left to right; the unseen family folds right to left
//! and uses a different question template. Because correctness is exactly
//! computable, the teacher used for distillation is a programmatic oracle:
//! [`locate_first_error`] and [`oracle_rewrite`].

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::split_steps;

pub const MODULUS: u32 = 100;
pub const MIN_DEPTH: usize = 2;
pub const MAX_DEPTH: usize = 6;
pub const ANSWER_PREFIX: &str = "The answer is ";

const SEEN_PREFIX: &str = "Start with ";
const SEEN_SUFFIX: &str = ". Result?";
const UNSEEN_PREFIX: &str = "From the right, evaluate ";
const UNSEEN_SUFFIX: &str = "?";
const MAX_CORRUPTION_RETRIES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SynthError {
    #[error("depth {0} outside [{MIN_DEPTH}, {MAX_DEPTH}]")]
    DepthOutOfRange(usize),
    #[error("operand {0} outside [0, 99]")]
    OperandOutOfRange(u32),
    #[error("expected {expected} operands for {ops} operators, got {got}")]
    ArityMismatch { ops: usize, expected: usize, got: usize },
    #[error("cannot parse question {0:?}")]
    BadQuestion(String),
    #[error("corruption step {index} out of range for {steps} steps")]
    StepOutOfRange { index: usize, steps: usize },
    #[error("corrupted value {0} equals the original value")]
    UnchangedValue(u32),
    #[error("solution is not a correct solution of the problem")]
    NotCorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "ARITH_SEEN")]
    ArithSeen,
    #[serde(rename = "ARITH_UNSEEN")]
    ArithUnseen,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::ArithSeen => "ARITH_SEEN",
            Family::ArithUnseen => "ARITH_UNSEEN",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Family::ArithSeen => 0x5EE1,
            Family::ArithUnseen => 0x0115_EE1,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "ADD")]
    Add,
    #[serde(rename = "SUB")]
    Sub,
    #[serde(rename = "MUL")]
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn apply(self, a: u32, b: u32) -> u32 {
        let (a, b) = (a % MODULUS, b % MODULUS);
        match self {
            Op::Add => (a + b) % MODULUS,
            Op::Sub => (a + MODULUS - b) % MODULUS,
            Op::Mul => (a * b) % MODULUS,
        }
    }

    pub fn glyph(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }

    pub fn from_glyph(c: char) -> Option<Op> {
        match c {
            '+' => Some(Op::Add),
            '-' => Some(Op::Sub),
            '*' => Some(Op::Mul),
            _ => None,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "minus",
            Op::Mul => "times",
        }
    }

    fn from_word(w: &str) -> Option<Op> {
        Op::ALL.into_iter().find(|op| op.word() == w)
    }
}

/// Knobs for problem generation. The defaults draw operands from the full
/// `[0, 99]` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub operand_max: u32,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { operand_max: MODULUS - 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub family: Family,
    pub question: String,
    pub operands: Vec<u32>,
    pub operators: Vec<Op>,
    pub depth: usize,
    pub answer: u32,
}

/// Which side of a step the running value sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AccSide {
    Left,
    Right,
}

/// The canonical content of one reasoning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFacts {
    pub label: u32,
    pub lhs: u32,
    pub op: Op,
    pub rhs: u32,
    pub result: u32,
}

impl StepFacts {
    pub fn render(&self) -> String {
        format!("Step {}: {} {} {} = {}.", self.label, self.lhs, self.op.glyph(), self.rhs, self.result)
    }
}

impl Problem {
    /// Builds a problem from explicit operands and operators, computing the answer.
    pub fn new(
        id: impl Into<String>,
        family: Family,
        operands: Vec<u32>,
        operators: Vec<Op>,
    ) -> Result<Self, SynthError> {
        let depth = operators.len();
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
            return Err(SynthError::DepthOutOfRange(depth));
        }
        if operands.len() != depth + 1 {
            return Err(SynthError::ArityMismatch { ops: depth, expected: depth + 1, got: operands.len() });
        }
        if let Some(&bad) = operands.iter().find(|&&v| v >= MODULUS) {
            return Err(SynthError::OperandOutOfRange(bad));
        }
        let question = render_question(family, &operands, &operators);
        let mut p = Problem { id: id.into(), family, question, operands, operators, depth, answer: 0 };
        p.answer = p.canonical_steps().last().map(|s| s.result).unwrap_or(0);
        Ok(p)
    }

    /// Reconstructs a problem from its rendered question text.
    pub fn from_question(id: impl Into<String>, family: Family, question: &str) -> Result<Self, SynthError> {
        let bad = || SynthError::BadQuestion(question.to_string());
        let (operands, operators) = match family {
            Family::ArithSeen => {
                let body =
                    question.strip_prefix(SEEN_PREFIX).and_then(|q| q.strip_suffix(SEEN_SUFFIX)).ok_or_else(bad)?;
                let mut parts = body.split(", ");
                let first = parts.next().ok_or_else(bad)?;
                let mut operands = vec![first.parse::<u32>().map_err(|_| bad())?];
                let mut operators = Vec::new();
                for part in parts {
                    let (word, num) = part.split_once(' ').ok_or_else(bad)?;
                    operators.push(Op::from_word(word).ok_or_else(bad)?);
                    operands.push(num.parse::<u32>().map_err(|_| bad())?);
                }
                (operands, operators)
            }
            Family::ArithUnseen => {
                let body =
                    question.strip_prefix(UNSEEN_PREFIX).and_then(|q| q.strip_suffix(UNSEEN_SUFFIX)).ok_or_else(bad)?;
                let mut operands = Vec::new();
                let mut operators = Vec::new();
                for (i, tok) in body.split(' ').enumerate() {
                    if i % 2 == 0 {
                        operands.push(tok.parse::<u32>().map_err(|_| bad())?);
                    } else {
                        let mut chars = tok.chars();
                        let op = chars.next().and_then(Op::from_glyph).ok_or_else(bad)?;
                        if chars.next().is_some() {
                            return Err(bad());
                        }
                        operators.push(op);
                    }
                }
                (operands, operators)
            }
        };
        let p = Problem::new(id, family, operands, operators)?;
        if p.question != question {
            return Err(bad());
        }
        Ok(p)
    }

    fn acc_side(&self) -> AccSide {
        match self.family {
            Family::ArithSeen => AccSide::Left,
            Family::ArithUnseen => AccSide::Right,
        }
    }

    /// Operator and fixed operand consumed at reasoning step `i`, plus the
    /// initial accumulator value.
    fn plan(&self, i: usize) -> (Op, u32) {
        match self.acc_side() {
            AccSide::Left => (self.operators[i], self.operands[i + 1]),
            AccSide::Right => {
                let k = self.depth - 1 - i;
                (self.operators[k], self.operands[k])
            }
        }
    }

    fn initial_acc(&self) -> u32 {
        match self.acc_side() {
            AccSide::Left => self.operands[0],
            AccSide::Right => self.operands[self.depth],
        }
    }

    /// Facts of step `i` when the running value entering it is `acc`.
    pub fn step_facts(&self, i: usize, acc: u32) -> StepFacts {
        let (op, fixed) = self.plan(i);
        let (lhs, rhs) = match self.acc_side() {
            AccSide::Left => (acc, fixed),
            AccSide::Right => (fixed, acc),
        };
        StepFacts { label: i as u32 + 1, lhs, op, rhs, result: op.apply(lhs, rhs) }
    }

    pub fn canonical_steps(&self) -> Vec<StepFacts> {
        let mut acc = self.initial_acc();
        (0..self.depth)
            .map(|i| {
                let f = self.step_facts(i, acc);
                acc = f.result;
                f
            })
            .collect()
    }
}

fn render_question(family: Family, operands: &[u32], operators: &[Op]) -> String {
    match family {
        Family::ArithSeen => {
            let mut q = format!("{SEEN_PREFIX}{}", operands[0]);
            for (op, v) in operators.iter().zip(&operands[1..]) {
                q.push_str(&format!(", {} {}", op.word(), v));
            }
            q.push_str(SEEN_SUFFIX);
            q
        }
        Family::ArithUnseen => {
            let mut q = format!("{UNSEEN_PREFIX}{}", operands[0]);
            for (op, v) in operators.iter().zip(&operands[1..]) {
                q.push_str(&format!(" {} {}", op.glyph(), v));
            }
            q.push_str(UNSEEN_SUFFIX);
            q
        }
    }
}

/// SplitMix64 step; derives independent per-instance seeds from a base seed.
pub fn instance_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gen_problem(family: Family, depth: usize, seed: u64) -> Result<Problem, SynthError> {
    gen_problem_with(family, depth, seed, &GenOptions::default())
}

pub fn gen_problem_with(family: Family, depth: usize, seed: u64, opts: &GenOptions) -> Result<Problem, SynthError> {
    if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
        return Err(SynthError::DepthOutOfRange(depth));
    }
    let hi = opts.operand_max.min(MODULUS - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ family.tag().rotate_left(32) ^ depth as u64);
    let operands: Vec<u32> = (0..=depth).map(|_| rng.gen_range(0..=hi)).collect();
    let operators: Vec<Op> = (0..depth).map(|_| Op::ALL[rng.gen_range(0..3)]).collect();
    let prefix = match family {
        Family::ArithSeen => "seen",
        Family::ArithUnseen => "unseen",
    };
    Problem::new(format!("{prefix}-d{depth}-{seed:016x}"), family, operands, operators)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSolution {
    pub steps: Vec<String>,
    pub final_answer_line: String,
    pub is_correct: bool,
}

impl StepSolution {
    pub fn render(&self) -> String {
        let mut out = self.steps.join(" ");
        if !self.final_answer_line.is_empty() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&self.final_answer_line);
        }
        out
    }

    /// Splits free text into steps and an answer line and grades it.
    pub fn from_text(text: &str, p: &Problem) -> Self {
        let mut sol = Self::parse_text(text);
        sol.is_correct = grade(p, &sol);
        sol
    }

    /// Structural split only; `is_correct` is left false.
    pub fn parse_text(text: &str) -> Self {
        let pieces: Vec<String> =
            split_steps(text).into_iter().map(|s| s.trim_start().to_string()).filter(|s| !s.is_empty()).collect();
        match pieces.iter().position(|s| s.starts_with(ANSWER_PREFIX.trim_end())) {
            Some(i) => StepSolution {
                steps: pieces[..i].to_vec(),
                final_answer_line: pieces[i..].join(" "),
                is_correct: false,
            },
            None => StepSolution { steps: pieces, final_answer_line: String::new(), is_correct: false },
        }
    }

    /// Steps followed by the answer line, the indexing used by error locating.
    pub fn indexed_steps(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.steps.iter().map(String::as_str).collect();
        out.push(&self.final_answer_line);
        out
    }
}

pub fn answer_line(value: u32) -> String {
    format!("{ANSWER_PREFIX}{value}")
}

pub fn render_solution(p: &Problem) -> StepSolution {
    StepSolution {
        steps: p.canonical_steps().iter().map(StepFacts::render).collect(),
        final_answer_line: answer_line(p.answer),
        is_correct: true,
    }
}

/// Integer stated by an answer line, if well formed.
pub fn parse_answer(line: &str) -> Option<u32> {
    let rest = line.trim().strip_prefix(ANSWER_PREFIX)?;
    let rest = rest.strip_suffix('.').unwrap_or(rest).trim_end();
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.len() > 9 {
        return None;
    }
    rest.parse().ok()
}

pub fn grade(p: &Problem, cand: &StepSolution) -> bool {
    parse_answer(&cand.final_answer_line) == Some(p.answer)
}

/// A step parsed leniently (whitespace around fields is optional), with the
/// byte span of every field so that a rewrite can touch only the wrong ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedStep {
    pub facts: StepFacts,
    pub label_span: Range<usize>,
    pub lhs_span: Range<usize>,
    pub op_span: Range<usize>,
    pub rhs_span: Range<usize>,
    pub result_span: Range<usize>,
}

struct Cursor<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos] == b' ' {
            self.pos += 1;
        }
    }

    fn lit(&mut self, lit: &str) -> Option<()> {
        let l = lit.as_bytes();
        if self.s[self.pos..].starts_with(l) {
            self.pos += l.len();
            Some(())
        } else {
            None
        }
    }

    fn int(&mut self) -> Option<(u32, Range<usize>)> {
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let len = self.pos - start;
        if len == 0 || len > 9 {
            return None;
        }
        let v = std::str::from_utf8(&self.s[start..self.pos]).ok()?.parse().ok()?;
        Some((v, start..self.pos))
    }
}

pub fn parse_step(text: &str) -> Option<ParsedStep> {
    let mut c = Cursor { s: text.as_bytes(), pos: 0 };
    c.skip_ws();
    c.lit("Step")?;
    c.skip_ws();
    let (label, label_span) = c.int()?;
    c.skip_ws();
    c.lit(":")?;
    c.skip_ws();
    let (lhs, lhs_span) = c.int()?;
    c.skip_ws();
    let op_pos = c.pos;
    let op = Op::from_glyph(*c.s.get(c.pos)? as char)?;
    c.pos += 1;
    c.skip_ws();
    let (rhs, rhs_span) = c.int()?;
    c.skip_ws();
    c.lit("=")?;
    c.skip_ws();
    let (result, result_span) = c.int()?;
    c.skip_ws();
    c.lit(".")?;
    c.skip_ws();
    if c.pos != c.s.len() {
        return None;
    }
    Some(ParsedStep {
        facts: StepFacts { label, lhs, op, rhs, result },
        label_span,
        lhs_span,
        op_span: op_pos..op_pos + 1,
        rhs_span,
        result_span,
    })
}

/// Index of the first erroneous step; the answer line has index `depth`.
pub fn locate_first_error(p: &Problem, cand: &StepSolution) -> Option<usize> {
    let mut acc = p.initial_acc();
    for i in 0..p.depth {
        let expected = p.step_facts(i, acc);
        let ok = cand.steps.get(i).and_then(|s| parse_step(s)).is_some_and(|ps| ps.facts == expected);
        if !ok {
            return Some(i);
        }
        acc = expected.result;
    }
    if cand.steps.len() > p.depth || parse_answer(&cand.final_answer_line) != Some(acc) {
        return Some(p.depth);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherVerdict {
    pub first_error_step: Option<usize>,
    pub rewritten: StepSolution,
}

fn splice_step(text: &str, ps: &ParsedStep, want: &StepFacts) -> String {
    let mut edits: Vec<(Range<usize>, String)> = Vec::new();
    if ps.facts.label != want.label {
        edits.push((ps.label_span.clone(), want.label.to_string()));
    }
    if ps.facts.lhs != want.lhs {
        edits.push((ps.lhs_span.clone(), want.lhs.to_string()));
    }
    if ps.facts.op != want.op {
        edits.push((ps.op_span.clone(), want.op.glyph().to_string()));
    }
    if ps.facts.rhs != want.rhs {
        edits.push((ps.rhs_span.clone(), want.rhs.to_string()));
    }
    if ps.facts.result != want.result {
        edits.push((ps.result_span.clone(), want.result.to_string()));
    }
    let mut out = text.to_string();
    // spans are in increasing order; apply from the back
    for (span, rep) in edits.into_iter().rev() {
        out.replace_range(span, &rep);
    }
    out
}

/// Keeps every step before the first error byte-for-byte and recomputes the
/// rest, reusing the candidate's own surface text wherever it parses so that
/// only wrong fields are edited.
pub fn oracle_rewrite(p: &Problem, cand: &StepSolution) -> TeacherVerdict {
    let Some(first) = locate_first_error(p, cand) else {
        let mut rewritten = cand.clone();
        rewritten.is_correct = true;
        return TeacherVerdict { first_error_step: None, rewritten };
    };
    let canonical = p.canonical_steps();
    let mut steps: Vec<String> = cand.steps[..first.min(cand.steps.len())].to_vec();
    for (i, want) in canonical.iter().enumerate().skip(first) {
        let fixed = match cand.steps.get(i) {
            Some(text) => match parse_step(text) {
                Some(ps) => splice_step(text, &ps, want),
                None => want.render(),
            },
            None => want.render(),
        };
        steps.push(fixed);
    }
    let final_answer_line = match parse_answer(&cand.final_answer_line) {
        Some(v) if v == p.answer => cand.final_answer_line.clone(),
        Some(_) => {
            let line = cand.final_answer_line.clone();
            let start = line.find(ANSWER_PREFIX).unwrap_or(0) + ANSWER_PREFIX.len();
            let digits = line[start..].bytes().take_while(u8::is_ascii_digit).count();
            let mut line = line;
            line.replace_range(start..start + digits, &p.answer.to_string());
            line
        }
        None => answer_line(p.answer),
    };
    TeacherVerdict {
        first_error_step: Some(first),
        rewritten: StepSolution { steps, final_answer_line, is_correct: true },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Propagation {
    #[serde(rename = "PROPAGATE")]
    Propagate,
    #[serde(rename = "LOCAL_ONLY")]
    LocalOnly,
}

/// A controlled error injected into a ground-truth solution. `step_index`
/// counts reasoning steps from 0; index `depth` addresses the answer line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub step_index: usize,
    pub original_value: u32,
    pub corrupted_value: u32,
    pub propagation: Propagation,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorruptError {
    #[error(transparent)]
    Invalid(#[from] SynthError),
    /// The corrupted solution still states the right answer; the caller must
    /// retry with another value. The would-be solution is attached.
    #[error("corruption leaves the final answer correct")]
    StillCorrect(StepSolution),
}

pub fn corrupt_solution(sol: &StepSolution, p: &Problem, c: &Corruption) -> Result<StepSolution, CorruptError> {
    if locate_first_error(p, sol).is_some() {
        return Err(SynthError::NotCorrect.into());
    }
    if c.step_index > p.depth {
        return Err(SynthError::StepOutOfRange { index: c.step_index, steps: p.depth + 1 }.into());
    }
    if c.corrupted_value == c.original_value {
        return Err(SynthError::UnchangedValue(c.corrupted_value).into());
    }
    let canonical = p.canonical_steps();
    let mut facts = canonical.clone();
    let mut answer = p.answer;
    if c.step_index == p.depth {
        answer = c.corrupted_value;
    } else {
        facts[c.step_index].result = c.corrupted_value;
        if c.propagation == Propagation::Propagate {
            let mut acc = c.corrupted_value;
            for (i, f) in facts.iter_mut().enumerate().skip(c.step_index + 1) {
                *f = p.step_facts(i, acc);
                acc = f.result;
            }
            answer = acc;
        }
    }
    let out = StepSolution {
        steps: facts.iter().map(StepFacts::render).collect(),
        final_answer_line: answer_line(answer),
        is_correct: answer == p.answer,
    };
    if out.is_correct {
        Err(CorruptError::StillCorrect(out))
    } else {
        Ok(out)
    }
}

/// Draws a random corruption; values are resampled from `[0, 99]` minus the
/// original until the answer turns wrong, at most 20 times.
pub fn random_corruption(
    p: &Problem,
    rng: &mut impl Rng,
    propagation: Propagation,
    step_index: Option<usize>,
) -> Option<(Corruption, StepSolution)> {
    let sol = render_solution(p);
    let canonical = p.canonical_steps();
    let index = step_index.unwrap_or_else(|| rng.gen_range(0..=p.depth));
    let original_value = if index == p.depth { p.answer } else { canonical[index].result };
    for _ in 0..MAX_CORRUPTION_RETRIES {
        let mut corrupted_value = rng.gen_range(0..MODULUS - 1);
        if corrupted_value >= original_value {
            corrupted_value += 1;
        }
        let c = Corruption { step_index: index, original_value, corrupted_value, propagation };
        if let Ok(bad) = corrupt_solution(&sol, p, &c) {
            return Some((c, bad));
        }
    }
    None
}

/// One JSON-lines record of a problem paired with a solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub id: String,
    pub family: Family,
    pub question: String,
    pub steps: Vec<String>,
    pub answer_line: String,
    pub label: bool,
}

impl SolutionRecord {
    pub fn new(p: &Problem, sol: &StepSolution) -> Self {
        SolutionRecord {
            id: p.id.clone(),
            family: p.family,
            question: p.question.clone(),
            steps: sol.steps.clone(),
            answer_line: sol.final_answer_line.clone(),
            label: sol.is_correct,
        }
    }

    pub fn problem(&self) -> Result<Problem, SynthError> {
        Problem::from_question(self.id.clone(), self.family, &self.question)
    }

    pub fn solution(&self) -> StepSolution {
        StepSolution { steps: self.steps.clone(), final_answer_line: self.answer_line.clone(), is_correct: self.label }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> Problem {
        Problem::new("ex", Family::ArithSeen, vec![3, 5, 2], vec![Op::Add, Op::Mul]).unwrap()
    }

    #[test]
    fn example_problem_answer() {
        assert_eq!(example().answer, 16);
        let z = Problem::new("z", Family::ArithSeen, vec![0, 0, 0], vec![Op::Add, Op::Mul]).unwrap();
        assert_eq!(z.answer, 0);
        assert!(render_solution(&z).steps.iter().all(|s| s.ends_with("= 0.")));
    }

    #[test]
    fn depth_bounds() {
        assert_eq!(gen_problem(Family::ArithSeen, 1, 0), Err(SynthError::DepthOutOfRange(1)));
        assert_eq!(gen_problem(Family::ArithSeen, 7, 0), Err(SynthError::DepthOutOfRange(7)));
        assert!(gen_problem(Family::ArithUnseen, 6, 0).is_ok());
    }

    #[test]
    fn renders_example() {
        let sol = render_solution(&example());
        assert_eq!(sol.steps, vec!["Step 1: 3 + 5 = 8.", "Step 2: 8 * 2 = 16."]);
        assert_eq!(sol.final_answer_line, "The answer is 16");
        assert_eq!(sol.render(), "Step 1: 3 + 5 = 8. Step 2: 8 * 2 = 16. The answer is 16");
        assert!(sol.is_correct);
    }

    #[test]
    fn unseen_folds_right_to_left() {
        let p = Problem::new("u", Family::ArithUnseen, vec![3, 5, 2], vec![Op::Sub, Op::Mul]).unwrap();
        assert_eq!(p.question, "From the right, evaluate 3 - 5 * 2?");
        let sol = render_solution(&p);
        assert_eq!(sol.steps, vec!["Step 1: 5 * 2 = 10.", "Step 2: 3 - 10 = 93."]);
        assert_eq!(p.answer, 93);
    }

    #[test]
    fn question_round_trip() {
        for fam in [Family::ArithSeen, Family::ArithUnseen] {
            let p = gen_problem(fam, 4, 99).unwrap();
            assert_eq!(Problem::from_question(p.id.clone(), fam, &p.question).unwrap(), p);
        }
        assert!(Problem::from_question("x", Family::ArithSeen, "Start with 3?").is_err());
    }

    #[test]
    fn propagate_and_local_corruptions() {
        let p = example();
        let sol = render_solution(&p);
        let c =
            Corruption { step_index: 0, original_value: 8, corrupted_value: 9, propagation: Propagation::Propagate };
        let bad = corrupt_solution(&sol, &p, &c).unwrap();
        assert_eq!(bad.steps, vec!["Step 1: 3 + 5 = 9.", "Step 2: 9 * 2 = 18."]);
        assert_eq!(bad.final_answer_line, "The answer is 18");
        assert!(!grade(&p, &bad));
        assert_eq!(locate_first_error(&p, &bad), Some(0));

        let local = Corruption { propagation: Propagation::LocalOnly, ..c };
        match corrupt_solution(&sol, &p, &local) {
            Err(CorruptError::StillCorrect(s)) => {
                assert_eq!(s.steps, vec!["Step 1: 3 + 5 = 9.", "Step 2: 8 * 2 = 16."]);
                assert_eq!(s.final_answer_line, "The answer is 16");
                assert_eq!(locate_first_error(&p, &s), Some(0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corruption_preconditions() {
        let p = example();
        let sol = render_solution(&p);
        let c =
            Corruption { step_index: 5, original_value: 8, corrupted_value: 9, propagation: Propagation::Propagate };
        assert!(matches!(corrupt_solution(&sol, &p, &c), Err(CorruptError::Invalid(_))));
        let same = Corruption { step_index: 0, corrupted_value: 8, ..c };
        assert!(matches!(corrupt_solution(&sol, &p, &same), Err(CorruptError::Invalid(_))));
    }

    #[test]
    fn oracle_rewrite_fixes_only_digits() {
        let p = example();
        let sol = render_solution(&p);
        let bad = StepSolution {
            steps: vec!["Step 1: 3 + 5 = 9.".into(), "Step 2: 9 * 2 = 18.".into()],
            final_answer_line: "The answer is 18".into(),
            is_correct: false,
        };
        let v = oracle_rewrite(&p, &bad);
        assert_eq!(v.first_error_step, Some(0));
        assert_eq!(v.rewritten.steps, sol.steps);
        assert_eq!(v.rewritten.final_answer_line, sol.final_answer_line);
        assert!(grade(&p, &v.rewritten));

        let same = oracle_rewrite(&p, &sol);
        assert_eq!(same.first_error_step, None);
        assert_eq!(same.rewritten, sol);
    }

    #[test]
    fn oracle_rewrite_keeps_odd_spacing() {
        let p = example();
        let cand = StepSolution::parse_text("Step 1: 3+5=8. Step 2: 8*2=61. The answer is 61");
        let v = oracle_rewrite(&p, &cand);
        assert_eq!(v.first_error_step, Some(1));
        assert_eq!(v.rewritten.steps, vec!["Step 1: 3+5=8.", "Step 2: 8*2=16."]);
        assert_eq!(v.rewritten.final_answer_line, "The answer is 16");
    }

    #[test]
    fn oracle_rewrite_handles_missing_and_extra_steps() {
        let p = example();
        let short = StepSolution::parse_text("Step 1: 3 + 5 = 8. The answer is 8");
        let v = oracle_rewrite(&p, &short);
        assert_eq!(v.first_error_step, Some(1));
        assert_eq!(v.rewritten, render_solution(&p));

        let long =
            StepSolution::parse_text("Step 1: 3 + 5 = 8. Step 2: 8 * 2 = 16. Step 3: 16 + 1 = 17. The answer is 17");
        let v = oracle_rewrite(&p, &long);
        assert_eq!(v.first_error_step, Some(2));
        assert_eq!(v.rewritten, render_solution(&p));
    }

    #[test]
    fn grade_rejects_malformed_answer() {
        let p = example();
        let mut sol = render_solution(&p);
        assert!(grade(&p, &sol));
        sol.final_answer_line = "The answer is".into();
        assert!(!grade(&p, &sol));
        sol.final_answer_line = String::new();
        assert!(!grade(&p, &sol));
        sol.final_answer_line = "The answer is 16.".into();
        assert!(grade(&p, &sol));
    }

    #[test]
    fn parse_text_splits_answer_line() {
        let p = example();
        let text = render_solution(&p).render();
        let parsed = StepSolution::from_text(&text, &p);
        assert_eq!(parsed, render_solution(&p));
        let junk = StepSolution::parse_text("Step 1: 3 + 5");
        assert_eq!(junk.steps, vec!["Step 1: 3 + 5"]);
        assert!(junk.final_answer_line.is_empty());
    }

    #[test]
    fn record_round_trip() {
        let p = gen_problem(Family::ArithUnseen, 3, 5).unwrap();
        let rec = SolutionRecord::new(&p, &render_solution(&p));
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"family\":\"ARITH_UNSEEN\""));
        let back: SolutionRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.problem().unwrap(), p);
        assert_eq!(back.solution(), render_solution(&p));
    }
}
