//! Greedy evaluation: per-family accuracy and where the first error sits.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_prompt, format_policy_prompt, CodecError, Vocab};
use crate::nn::{generate, DecodeOptions, ModelError, Params};
use crate::synth::{grade, locate_first_error, Family, Problem, StepSolution};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set shares {count} problem ids with the training data (first: {first})")]
    Overlap { count: usize, first: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decode {
    pub problem_id: String,
    pub family: Family,
    pub text: String,
    pub correct: bool,
    pub truncated: bool,
    /// Reasoning steps between the first error and the answer; `None` for
    /// correct, truncated, or empty decodes.
    pub error_distance: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FirstErrorHistogram {
    /// Distance (depth minus first-error index) to count.
    pub counts: BTreeMap<usize, usize>,
    /// Incorrect decodes that were truncated or empty.
    pub unparsed: usize,
}

impl FirstErrorHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum::<usize>() + self.unparsed
    }

    pub fn mean_distance(&self) -> Option<f64> {
        let n: usize = self.counts.values().sum();
        (n > 0).then(|| self.counts.iter().map(|(d, c)| (d * c) as f64).sum::<f64>() / n as f64)
    }

    /// Counts as fractions of all incorrect decodes, parsed buckets first.
    pub fn ratios(&self) -> Vec<(String, f64)> {
        let total = self.total().max(1) as f64;
        let mut out: Vec<(String, f64)> = self.counts.iter().map(|(d, c)| (d.to_string(), *c as f64 / total)).collect();
        out.push(("unparsed".into(), self.unparsed as f64 / total));
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: BTreeMap<Family, f64>,
    pub counts: BTreeMap<Family, usize>,
    pub first_error_histogram: FirstErrorHistogram,
    pub n_evaluated: usize,
    pub truncation_count: usize,
    pub decodes: Vec<Decode>,
}

fn classify(p: &Problem, text: &str, truncated: bool) -> Decode {
    let sol = StepSolution::parse_text(text);
    let correct = !truncated && grade(p, &sol);
    let error_distance = if correct || truncated || text.trim().is_empty() {
        None
    } else {
        // a wrong answer always has some first error
        locate_first_error(p, &sol).map(|k| p.depth - k.min(p.depth))
    };
    Decode { problem_id: p.id.clone(), family: p.family, text: text.to_string(), correct, truncated, error_distance }
}

/// Greedy decodes, one per problem, in input order.
pub fn greedy_decodes(
    params: &Params<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    max_new: usize,
) -> Result<Vec<Decode>, EvalError> {
    let prompts =
        problems.iter().map(|p| encode_prompt(vocab, &format_policy_prompt(p))).collect::<Result<Vec<_>, _>>()?;
    let chunks: Vec<Result<Vec<Decode>, EvalError>> = prompts
        .par_chunks(32)
        .zip(problems.par_chunks(32))
        .map(|(ps, probs)| {
            let gens = generate(params, ps, DecodeOptions::greedy(max_new), &vec![0; ps.len()])?;
            gens.into_iter().zip(probs).map(|(g, p)| Ok(classify(p, &vocab.decode(&g.tokens)?, !g.hit_eos()))).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(problems.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn summarize(decodes: Vec<Decode>) -> EvalReport {
    let mut r = EvalReport { n_evaluated: decodes.len(), ..Default::default() };
    let mut correct: BTreeMap<Family, usize> = BTreeMap::new();
    for d in &decodes {
        *r.counts.entry(d.family).or_default() += 1;
        *correct.entry(d.family).or_default() += usize::from(d.correct);
        r.truncation_count += usize::from(d.truncated);
        if !d.correct {
            match d.error_distance {
                Some(k) => *r.first_error_histogram.counts.entry(k).or_default() += 1,
                None => r.first_error_histogram.unparsed += 1,
            }
        }
    }
    for (f, n) in &r.counts {
        r.accuracy.insert(*f, correct[f] as f64 / *n as f64);
    }
    r.decodes = decodes;
    r
}

/// Greedy accuracy and first-error histogram. Refuses any test problem whose
/// id appears in `train_ids`.
pub fn evaluate(
    params: &Params<f32>,
    vocab: &Vocab,
    testset: &[Problem],
    train_ids: &HashSet<String>,
    max_new: usize,
) -> Result<EvalReport, EvalError> {
    let overlap: Vec<&Problem> = testset.iter().filter(|p| train_ids.contains(&p.id)).collect();
    if let Some(first) = overlap.first() {
        return Err(EvalError::Overlap { count: overlap.len(), first: first.id.clone() });
    }
    Ok(summarize(greedy_decodes(params, vocab, testset, max_new)?))
}

pub fn first_error_histogram(
    params: &Params<f32>,
    vocab: &Vocab,
    testset: &[Problem],
    train_ids: &HashSet<String>,
    max_new: usize,
) -> Result<FirstErrorHistogram, EvalError> {
    Ok(evaluate(params, vocab, testset, train_ids, max_new)?.first_error_histogram)
}
