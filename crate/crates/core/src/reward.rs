//! The generative reward model: distillation data, training, and inference
//! (rewriting, error locating, token rewards).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    encode_prompt, format_locating_prompt, format_rewrite_prompt_text, locating_target, parse_locating_target,
    CodecError, Encoded, Vocab,
};
use crate::nn::{forward, generate, DecodeOptions, ModelError, Params};
use crate::synth::{grade, oracle_rewrite, render_solution, Problem, StepSolution};
use crate::train::{fit_supervised, FitReport, SupervisedConfig, TrainError, WeightedSeq};

/// Reward thresholds `(alpha, beta)` for wrong and right samples.
pub const NEGATIVE_BOUNDS: (f64, f64) = (-0.1, 0.0);
pub const POSITIVE_BOUNDS: (f64, f64) = (0.0, 0.5);

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("reward {value} at token {index} outside [{alpha}, {beta}]")]
    OutOfBounds { index: usize, value: f64, alpha: f64, beta: f64 },
    #[error("malformed distill record: {0}")]
    BadRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Sign::Positive => POSITIVE_BOUNDS,
            Sign::Negative => NEGATIVE_BOUNDS,
        }
    }
}

/// `Clip(p - 0.5, alpha, beta)` with the thresholds for `sign`.
pub fn clip_reward(p: f64, sign: Sign) -> f64 {
    let (a, b) = sign.bounds();
    (p - 0.5).clamp(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub rewards: Vec<f64>,
    /// Reward-model probability of each sampled token; empty for uniform
    /// vectors.
    pub probs: Vec<f64>,
    pub sign: Sign,
    pub alpha: f64,
    pub beta: f64,
}

impl RewardVector {
    pub fn from_probs(probs: Vec<f64>, sign: Sign) -> Self {
        let (alpha, beta) = sign.bounds();
        let rewards = probs.iter().map(|&p| clip_reward(p, sign)).collect();
        RewardVector { rewards, probs, sign, alpha, beta }
    }

    /// The same reward on every token: `alpha` for negatives, `beta` for
    /// positives.
    pub fn uniform(len: usize, sign: Sign) -> Self {
        let (alpha, beta) = sign.bounds();
        let v = match sign {
            Sign::Negative => alpha,
            Sign::Positive => beta,
        };
        RewardVector { rewards: vec![v; len], probs: Vec::new(), sign, alpha, beta }
    }

    pub fn check_bounds(&self) -> Result<(), RewardError> {
        let (alpha, beta) = self.sign.bounds();
        for (index, &value) in self.rewards.iter().enumerate() {
            if !(alpha..=beta).contains(&value) {
                return Err(RewardError::OutOfBounds { index, value, alpha, beta });
            }
        }
        Ok(())
    }

    /// Index of the lowest reward; ties go to the lower probability, then to
    /// the earlier token.
    pub fn argmin(&self) -> Option<usize> {
        let prob = |i: usize| self.probs.get(i).copied().unwrap_or(0.0);
        (0..self.rewards.len()).reduce(|best, i| {
            let (rb, ri) = (self.rewards[best], self.rewards[i]);
            if ri < rb || (ri == rb && prob(i) < prob(best)) {
                i
            } else {
                best
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Subtask {
    Locate,
    Rewrite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillExample {
    pub subtask: Subtask,
    pub prompt_text: String,
    pub target_text: String,
}

impl DistillExample {
    pub fn encode(&self, vocab: &Vocab) -> Result<Encoded, CodecError> {
        Encoded::new(vocab, &self.prompt_text, &self.target_text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Share of the set made of examples built from correct candidates.
    pub echo_fraction: f64,
    pub max_context: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { echo_fraction: 0.2, max_context: 512 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillStats {
    pub wrong: usize,
    pub correct_used: usize,
    pub correct_available: usize,
    pub skipped: usize,
}

fn fits(vocab: &Vocab, ex: &DistillExample, max_context: usize) -> bool {
    ex.encode(vocab).is_ok_and(|e| e.tokens.len() <= max_context)
}

/// Two examples (locate, rewrite) per wrong candidate, plus echo pairs from
/// correct candidates so that they make up `echo_fraction` of the result.
/// Candidates are `(problem, raw solution text)`.
pub fn build_distill_set(
    vocab: &Vocab,
    candidates: &[(Problem, String)],
    cfg: &DistillConfig,
) -> (Vec<DistillExample>, DistillStats) {
    let mut stats = DistillStats::default();
    let mut wrong = Vec::new();
    let mut correct = Vec::new();
    for (p, text) in candidates {
        let sol = StepSolution::parse_text(text);
        let s = render_solution(p);
        let (locate_target, rewrite_target, bucket) = if grade(p, &sol) {
            (locating_target(None), text.clone(), &mut correct)
        } else {
            let verdict = oracle_rewrite(p, &sol);
            (locating_target(verdict.first_error_step), verdict.rewritten.render(), &mut wrong)
        };
        let pair = [
            DistillExample {
                subtask: Subtask::Locate,
                prompt_text: format_locating_prompt(p, &s, &sol),
                target_text: locate_target,
            },
            DistillExample {
                subtask: Subtask::Rewrite,
                prompt_text: format_rewrite_prompt_text(p, &s, text),
                target_text: rewrite_target,
            },
        ];
        if pair.iter().all(|ex| fits(vocab, ex, cfg.max_context)) {
            bucket.push(pair);
        } else {
            stats.skipped += 1;
        }
    }
    stats.wrong = wrong.len();
    stats.correct_available = correct.len();
    let f = cfg.echo_fraction.clamp(0.0, 0.99);
    let want = ((f / (1.0 - f)) * wrong.len() as f64).round() as usize;
    stats.correct_used = want.min(correct.len());
    let out = wrong.into_iter().chain(correct.into_iter().take(stats.correct_used)).flatten().collect();
    (out, stats)
}

pub fn write_distill_jsonl(path: &Path, set: &[DistillExample]) -> Result<(), RewardError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in set {
        let line = serde_json::to_string(ex).map_err(|e| RewardError::BadRecord(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_distill_jsonl(path: &Path) -> Result<Vec<DistillExample>, RewardError> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RewardError::BadRecord(e.to_string()))?);
    }
    Ok(out)
}

/// Cross-entropy on the response spans only.
pub fn train_reward_model(
    rm: &mut Params<f32>,
    vocab: &Vocab,
    data: &[DistillExample],
    cfg: &SupervisedConfig,
    on_step: &mut dyn FnMut(usize, &Params<f32>),
) -> Result<FitReport, TrainError> {
    let seqs: Vec<WeightedSeq> =
        data.iter().map(|ex| ex.encode(vocab).map(|e| WeightedSeq::uniform(&e))).collect::<Result<_, _>>()?;
    fit_supervised(rm, &seqs, cfg, on_step)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub text: String,
    pub solution: StepSolution,
    /// Decoding stopped without EOS.
    pub truncated: bool,
}

impl RewriteOutcome {
    pub fn passes(&self, p: &Problem) -> bool {
        !self.truncated && grade(p, &self.solution)
    }
}

fn greedy_many(
    rm: &Params<f32>,
    prompts: Vec<Vec<u32>>,
    max_new: usize,
) -> Result<Vec<crate::nn::Generation>, ModelError> {
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(64) {
        out.extend(generate(rm, chunk, DecodeOptions::greedy(max_new), &vec![0; chunk.len()])?);
    }
    Ok(out)
}

/// Greedy rewrites of `(problem, candidate text)` pairs.
/// The encoded REWRITE prompt for `text` as a prediction of `p`.
pub fn rewrite_prompt_tokens(vocab: &Vocab, p: &Problem, text: &str) -> Result<Vec<u32>, CodecError> {
    encode_prompt(vocab, &format_rewrite_prompt_text(p, &render_solution(p), text))
}

pub fn rewrite_many(
    rm: &Params<f32>,
    vocab: &Vocab,
    items: &[(&Problem, &str)],
    max_new: usize,
) -> Result<Vec<RewriteOutcome>, RewardError> {
    let prompts = items.iter().map(|(p, text)| rewrite_prompt_tokens(vocab, p, text)).collect::<Result<Vec<_>, _>>()?;
    let gens = greedy_many(rm, prompts, max_new)?;
    gens.into_iter()
        .zip(items)
        .map(|(g, (p, _))| {
            let text = vocab.decode(&g.tokens)?;
            let solution = StepSolution::from_text(&text, p);
            Ok(RewriteOutcome { text, solution, truncated: !g.hit_eos() })
        })
        .collect()
}

pub fn rewrite(
    rm: &Params<f32>,
    vocab: &Vocab,
    p: &Problem,
    text: &str,
    max_new: usize,
) -> Result<RewriteOutcome, RewardError> {
    Ok(rewrite_many(rm, vocab, &[(p, text)], max_new)?.remove(0))
}

/// Greedy locating. `Some(None)` means "correct", `Some(Some(k))` step `k`,
/// and `None` an unparseable completion.
pub fn locate_many(
    rm: &Params<f32>,
    vocab: &Vocab,
    items: &[(&Problem, &str)],
) -> Result<Vec<Option<Option<usize>>>, RewardError> {
    let prompts = items
        .iter()
        .map(|(p, text)| {
            encode_prompt(vocab, &format_locating_prompt(p, &render_solution(p), &StepSolution::parse_text(text)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gens = greedy_many(rm, prompts, 16)?;
    gens.into_iter().map(|g| Ok(parse_locating_target(&vocab.decode(&g.tokens)?))).collect()
}

pub fn locate(rm: &Params<f32>, vocab: &Vocab, p: &Problem, text: &str) -> Result<Option<Option<usize>>, RewardError> {
    Ok(locate_many(rm, vocab, &[(p, text)])?.remove(0))
}

/// Teacher-forces `tokens` (the sample, as the policy produced it) after the
/// rewrite prompt built from `text` and clips each token's probability.
pub fn token_rewards(
    rm: &Params<f32>,
    vocab: &Vocab,
    p: &Problem,
    text: &str,
    tokens: &[u32],
    sign: Sign,
) -> Result<RewardVector, RewardError> {
    if tokens.is_empty() {
        return Ok(RewardVector::from_probs(Vec::new(), sign));
    }
    let mut input = rewrite_prompt_tokens(vocab, p, text)?;
    let start = input.len();
    input.extend(tokens);
    let trace = forward(rm, &input)?;
    let probs = (start..input.len()).map(|j| (trace.token_logprob(j) as f64).exp()).collect();
    let rv = RewardVector::from_probs(probs, sign);
    rv.check_bounds()?;
    Ok(rv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{corrupt_solution, Corruption, Family, Op, Propagation};

    #[test]
    fn clip_examples() {
        assert_eq!(clip_reward(0.98, Sign::Negative), 0.0);
        assert!((clip_reward(0.02, Sign::Negative) + 0.1).abs() < 1e-12);
        assert_eq!(clip_reward(0.40, Sign::Positive), 0.0);
        assert!((clip_reward(0.9, Sign::Positive) - 0.4).abs() < 1e-12);
        assert_eq!(clip_reward(1.0, Sign::Positive), 0.5);
    }

    #[test]
    fn confident_negative_rewards_are_two_valued() {
        let rv = RewardVector::from_probs(vec![1.0, 0.0, 1.0, 0.0], Sign::Negative);
        assert_eq!(rv.rewards, vec![0.0, -0.1, 0.0, -0.1]);
        assert_eq!(rv.argmin(), Some(1));
        rv.check_bounds().unwrap();
    }

    #[test]
    fn argmin_breaks_ties_by_probability() {
        let rv = RewardVector::from_probs(vec![0.9, 0.3, 0.1, 0.2], Sign::Negative);
        assert_eq!(rv.argmin(), Some(2));
    }

    #[test]
    fn distill_pairs_and_echo_share() {
        let vocab = Vocab::default();
        let p = Problem::new("t", Family::ArithSeen, vec![3, 5, 2], vec![Op::Add, Op::Mul]).unwrap();
        let good = render_solution(&p);
        let c =
            Corruption { step_index: 0, original_value: 8, corrupted_value: 9, propagation: Propagation::Propagate };
        let bad = corrupt_solution(&good, &p, &c).unwrap();
        let mut cands = vec![(p.clone(), bad.render()); 4];
        cands.push((p.clone(), good.render()));
        cands.push((p.clone(), good.render()));
        let (set, stats) = build_distill_set(&vocab, &cands, &DistillConfig::default());
        assert_eq!(stats.wrong, 4);
        assert_eq!(stats.correct_used, 1);
        assert_eq!(set.len(), 10);
        assert_eq!(set[0].target_text, "The first error step is [0]");
        assert_eq!(set[1].target_text, "Step 1: 3 + 5 = 8. Step 2: 8 * 2 = 16. The answer is 16");
        assert_eq!(set[8].target_text, "correct");
        assert_eq!(set[9].target_text, good.render());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let set = vec![DistillExample {
            subtask: Subtask::Locate,
            prompt_text: "a\nb".into(),
            target_text: "correct".into(),
        }];
        write_distill_jsonl(&path, &set).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"subtask\":\"LOCATE\""));
        assert_eq!(read_distill_jsonl(&path).unwrap(), set);
    }
}
