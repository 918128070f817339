//! Supervised fitting, rollout collection, and the token-level RL trainer with
//! imitation regularization, plus the RFT and sequence-level PPO baselines.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{error_token_set, token_weights, AlignError};
use crate::codec::{encode_prompt, format_policy_prompt, CodecError, Encoded, Vocab, EOS};
use crate::nn::{
    backward_targets, forward, generate, weighted_ce_accumulate, Adam, AdamConfig, DecodeOptions, ModelError,
    OptimizerState, Params, Scalar, Target,
};
use crate::reward::{self, RewardError, RewardVector, Sign};
use crate::synth::{grade, oracle_rewrite, render_solution, Problem, StepSolution};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<Params<f32>> },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("reference parameters changed during training")]
    ReferenceMutated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Hyperparameters for plain (weighted) cross-entropy training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    /// Learning rate at the last step, as a fraction of `lr`.
    pub final_lr_frac: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            lr: 3e-3,
            batch_size: 16,
            steps: 1000,
            warmup: 100,
            final_lr_frac: 0.05,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Linear warmup followed by linear decay.
pub fn lr_at(step: usize, total: usize, base: f64, warmup: usize, final_frac: f64) -> f64 {
    let warm = if warmup > 0 { ((step + 1) as f64 / warmup as f64).min(1.0) } else { 1.0 };
    let decay = if total > 1 { 1.0 - (1.0 - final_frac) * step as f64 / (total - 1) as f64 } else { 1.0 };
    base * warm * decay
}

/// A token sequence with per-token weights on `[start, len)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSeq {
    pub tokens: Vec<u32>,
    pub start: usize,
    pub weights: Vec<f32>,
}

impl WeightedSeq {
    pub fn uniform(e: &Encoded) -> Self {
        let n = e.tokens.len() - e.response_start;
        WeightedSeq { tokens: e.tokens.clone(), start: e.response_start, weights: vec![1.0; n] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Pre-clipping gradient norms.
    pub grad_norms: Vec<f64>,
    /// Adam moments after the last update.
    #[serde(skip)]
    pub optimizer: Option<OptimizerState<f32>>,
}

/// Minibatch Adam on the normalized weighted cross-entropy, averaged over each
/// batch. `on_step(step, params)` runs after every update.
pub fn fit_supervised(
    params: &mut Params<f32>,
    data: &[WeightedSeq],
    cfg: &SupervisedConfig,
    on_step: &mut dyn FnMut(usize, &Params<f32>),
) -> Result<FitReport, TrainError> {
    let mut report = FitReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(TrainError::Invalid("empty training data or zero batch size".into()));
    }
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..AdamConfig::default() }, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let scale = 1.0 / cfg.batch_size as f32;
    for step in 0..cfg.steps {
        let mut grads = params.zeros_like();
        let mut loss = 0.0f64;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &data[order[cursor]];
            cursor += 1;
            let span = ex.start..ex.tokens.len();
            loss += weighted_ce_accumulate(params, &ex.tokens, span, &ex.weights, scale, &mut grads)? as f64;
        }
        loss /= cfg.batch_size as f64;
        let lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup, cfg.final_lr_frac);
        let norm = match opt.step_with_lr(params, &grads, lr) {
            Ok(n) if loss.is_finite() => n,
            _ => return Err(TrainError::Diverged { step, last_good: Box::new(params.clone()) }),
        };
        report.losses.push(loss);
        report.lrs.push(lr);
        report.grad_norms.push(norm);
        on_step(step, params);
    }
    report.optimizer = Some(opt.state);
    Ok(report)
}

/// Ground-truth solutions behind the policy prompt.
pub fn sft_examples(vocab: &Vocab, problems: &[Problem]) -> Result<Vec<WeightedSeq>, TrainError> {
    problems
        .iter()
        .map(|p| {
            let e = Encoded::new(vocab, &format_policy_prompt(p), &render_solution(p).render())?;
            Ok(WeightedSeq::uniform(&e))
        })
        .collect()
}

pub fn train_sft(
    params: &mut Params<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    cfg: &SupervisedConfig,
    on_step: &mut dyn FnMut(usize, &Params<f32>),
) -> Result<FitReport, TrainError> {
    let data = sft_examples(vocab, problems)?;
    fit_supervised(params, &data, cfg, on_step)
}

/// One sampled solution. `tokens` excludes EOS; `ref_logprobs` are the
/// reference model's log-probabilities of those tokens at sampling time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub problem_index: usize,
    pub problem_id: String,
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    pub text: String,
    pub ref_logprobs: Vec<f64>,
    pub sign: Sign,
    pub truncated: bool,
}

/// Policy prompt tokens for every problem.
pub fn policy_prompts(vocab: &Vocab, problems: &[Problem]) -> Result<Vec<Vec<u32>>, TrainError> {
    Ok(problems.iter().map(|p| encode_prompt(vocab, &format_policy_prompt(p))).collect::<Result<_, _>>()?)
}

/// `k` samples per problem from `reference`; sample `j` of problem `i` uses
/// its own seed so results do not depend on batch composition.
pub fn collect_rollouts(
    reference: &Params<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    k: usize,
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> Result<Vec<Rollout>, TrainError> {
    let prompts = policy_prompts(vocab, problems)?;
    let mut all_prompts = Vec::with_capacity(problems.len() * k);
    let mut seeds = Vec::with_capacity(problems.len() * k);
    for (i, p) in prompts.iter().enumerate() {
        for j in 0..k {
            all_prompts.push(p.clone());
            seeds.push(crate::synth::instance_seed(seed, (i * k + j) as u64));
        }
    }
    let mut out = Vec::with_capacity(all_prompts.len());
    // bounded batches keep the KV caches small
    for (chunk_p, chunk_s) in all_prompts.chunks(64).zip(seeds.chunks(64)) {
        let gens = generate(reference, chunk_p, DecodeOptions { temperature, max_new }, chunk_s)?;
        for (prompt, g) in chunk_p.iter().zip(gens) {
            let i = out.len() / k;
            let p = &problems[i];
            let text = vocab.decode(&g.tokens)?;
            let truncated = !g.hit_eos();
            let correct = !truncated && grade(p, &StepSolution::parse_text(&text));
            out.push(Rollout {
                problem_index: i,
                problem_id: p.id.clone(),
                prompt: prompt.clone(),
                tokens: g.tokens,
                text,
                ref_logprobs: g.logprobs,
                sign: if correct { Sign::Positive } else { Sign::Negative },
                truncated,
            });
        }
    }
    Ok(out)
}

/// Greedy accuracy of `params` on `problems`.
pub fn greedy_accuracy(
    params: &Params<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    max_new: usize,
) -> Result<f64, TrainError> {
    if problems.is_empty() {
        return Ok(0.0);
    }
    let rs = collect_rollouts(params, vocab, problems, 1, 0.0, max_new, 0)?;
    Ok(rs.iter().filter(|r| r.sign == Sign::Positive).count() as f64 / problems.len() as f64)
}

pub fn importance_ratio(logp: f64, ref_logp: f64) -> f64 {
    (logp - ref_logp).exp()
}

/// `min(r R, clip(r, 1 - eps, 1 + eps) R)`.
pub fn clipped_coefficient(r: f64, reward: f64, epsilon: f64) -> f64 {
    (r * reward).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * reward)
}

/// How rewards are assigned to rollout tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RewardMode {
    /// Clipped reward-model probabilities per token.
    TokenLevel,
    /// The sign's extreme threshold on every token of the rollout.
    InstanceUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub phi: f64,
    pub lambda_ir: f64,
    pub samples_per_question: usize,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub epochs: usize,
    pub max_new: usize,
    pub eval_every: usize,
    pub reward_mode: RewardMode,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            epsilon: 0.3,
            gamma: 1.0,
            phi: 0.1,
            lambda_ir: 1.0,
            samples_per_question: 4,
            temperature: 0.8,
            lr: 5e-5,
            batch_size: 16,
            max_steps: 200,
            epochs: 1,
            max_new: 160,
            eval_every: 25,
            reward_mode: RewardMode::TokenLevel,
            seed: 0,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Invalid(m.into()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.lambda_ir >= 0.0) {
            return bad("lambda_ir must be non-negative");
        }
        if self.samples_per_question == 0 || self.batch_size == 0 {
            return bad("samples_per_question and batch_size must be at least 1");
        }
        if !(self.gamma > 0.0) || !(0.0..=1.0).contains(&self.phi) {
            return bad("gamma must be positive and phi in [0, 1]");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RLConfig = serde_json::from_str(&text).map_err(|e| TrainError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Gradient of `-J_RL` for one rollout, accumulated into `grads` with weight
/// `scale`. Coefficients are frozen: `J_RL = sum_j coeff_j log P(t_j)`.
/// Returns `(J_RL, mean ratio)`.
pub fn rl_gradients<T: Scalar>(
    params: &Params<T>,
    rollout: &Rollout,
    rewards: &[f64],
    epsilon: f64,
    scale: T,
    grads: &mut Params<T>,
) -> Result<(f64, f64), TrainError> {
    let n = rollout.tokens.len();
    if rewards.len() != n || rollout.ref_logprobs.len() != n {
        return Err(TrainError::Invalid(format!(
            "{} rewards and {} reference logprobs for {n} tokens",
            rewards.len(),
            rollout.ref_logprobs.len()
        )));
    }
    if n == 0 {
        return Ok((0.0, 1.0));
    }
    let mut input = rollout.prompt.clone();
    input.extend(&rollout.tokens);
    let trace = forward(params, &input)?;
    let p0 = rollout.prompt.len();
    let mut j_rl = 0.0;
    let mut ratio_sum = 0.0;
    let mut targets = Vec::with_capacity(n);
    for j in 0..n {
        let logp = trace.token_logprob(p0 + j).f64();
        let r = importance_ratio(logp, rollout.ref_logprobs[j]);
        ratio_sum += r;
        let coeff = clipped_coefficient(r, rewards[j], epsilon);
        j_rl += coeff * logp;
        if coeff != 0.0 {
            targets.push(Target { row: p0 + j - 1, token: rollout.tokens[j], coeff: T::lit(coeff) * scale });
        }
    }
    if !targets.is_empty() {
        backward_targets(params, &trace, &targets, grads);
    }
    Ok((j_rl, ratio_sum / n as f64))
}

/// Sequence-level variant: one ratio `exp(sum_j (log P - log P_ref))` and one
/// reward shared by every token.
pub fn sequence_rl_gradients<T: Scalar>(
    params: &Params<T>,
    rollout: &Rollout,
    reward: f64,
    epsilon: f64,
    scale: T,
    grads: &mut Params<T>,
) -> Result<(f64, f64), TrainError> {
    let n = rollout.tokens.len();
    if rollout.ref_logprobs.len() != n {
        return Err(TrainError::Invalid("reference logprobs misaligned".into()));
    }
    if n == 0 {
        return Ok((0.0, 1.0));
    }
    let mut input = rollout.prompt.clone();
    input.extend(&rollout.tokens);
    let trace = forward(params, &input)?;
    let p0 = rollout.prompt.len();
    let logps: Vec<f64> = (0..n).map(|j| trace.token_logprob(p0 + j).f64()).collect();
    let delta: f64 = logps.iter().zip(&rollout.ref_logprobs).map(|(a, b)| a - b).sum();
    let r = delta.exp();
    let coeff = clipped_coefficient(r, reward, epsilon);
    let targets: Vec<Target<T>> =
        (0..n).map(|j| Target { row: p0 + j - 1, token: rollout.tokens[j], coeff: T::lit(coeff) * scale }).collect();
    if coeff != 0.0 {
        backward_targets(params, &trace, &targets, grads);
    }
    Ok((coeff * logps.iter().sum::<f64>(), r))
}

/// An imitation target: the rewritten solution behind the policy prompt, with
/// edit-derived weights over its tokens and the closing EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationTarget {
    pub seq: WeightedSeq,
    pub error_tokens: BTreeSet<usize>,
}

/// Weights `gamma` on tokens of `rewrite` that were replaced or inserted
/// relative to `sample`, `phi * gamma` elsewhere; EOS gets `phi * gamma`.
pub fn imitation_target(
    prompt: &[u32],
    sample: &[u32],
    rewrite: &[u32],
    gamma: f64,
    phi: f64,
) -> Result<ImitationTarget, TrainError> {
    let errors = error_token_set(sample, rewrite);
    let w = token_weights(rewrite.len(), &errors, gamma, phi)?;
    let mut tokens = prompt.to_vec();
    tokens.extend(rewrite);
    tokens.push(EOS);
    let mut weights: Vec<f32> = w.weights.iter().map(|&x| x as f32).collect();
    weights.push((phi * gamma) as f32);
    Ok(ImitationTarget { seq: WeightedSeq { tokens, start: prompt.len(), weights }, error_tokens: errors })
}

/// Gradient of `L_IR` (normalized weighted CE over the rewrite) scaled by
/// `scale`; returns `L_IR`.
pub fn imitation_gradients<T: Scalar>(
    params: &Params<T>,
    target: &ImitationTarget,
    scale: T,
    grads: &mut Params<T>,
) -> Result<f64, TrainError> {
    let s = &target.seq;
    let w: Vec<T> = s.weights.iter().map(|&x| T::lit(x as f64)).collect();
    Ok(weighted_ce_accumulate(params, &s.tokens, s.start..s.tokens.len(), &w, scale, grads)?.f64())
}

/// A rollout with everything the update needs: per-token rewards and, for
/// negatives, the imitation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedRollout {
    pub rollout: Rollout,
    pub rewards: RewardVector,
    pub imitation: Option<ImitationTarget>,
    /// True when the reward model's rewrite failed grading and the oracle's
    /// was used instead.
    pub oracle_fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub rollouts: usize,
    pub negatives: usize,
    pub oracle_fallbacks: usize,
    /// Rollouts dropped because the rewrite prompt plus the sample exceeds the
    /// reward model's context.
    pub overflow_dropped: usize,
}

/// Scores rollouts with the reward model and builds imitation targets for the
/// negative ones (reward-model rewrite when it grades correct, oracle
/// otherwise). Rollouts too long to score are dropped.
pub fn prepare_rollouts(
    rm: &Params<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    rollouts: Vec<Rollout>,
    cfg: &RLConfig,
) -> Result<(Vec<PreparedRollout>, PrepareStats), TrainError> {
    let mut stats = PrepareStats { rollouts: rollouts.len(), ..Default::default() };
    let mut kept = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        let prompt = reward::rewrite_prompt_tokens(vocab, &problems[r.problem_index], &r.text)?;
        if prompt.len() + r.tokens.len() <= rm.cfg.max_context {
            kept.push(r);
        } else {
            stats.overflow_dropped += 1;
        }
    }
    let rollouts = kept;
    let negatives: Vec<usize> =
        rollouts.iter().enumerate().filter(|(_, r)| r.sign == Sign::Negative).map(|(i, _)| i).collect();
    stats.negatives = negatives.len();
    let rewrite_inputs: Vec<(&Problem, &str)> =
        negatives.iter().map(|&i| (&problems[rollouts[i].problem_index], rollouts[i].text.as_str())).collect();
    let rewrites = reward::rewrite_many(rm, vocab, &rewrite_inputs, cfg.max_new)?;
    let mut rewrite_of = vec![None; rollouts.len()];
    for (&i, rw) in negatives.iter().zip(rewrites) {
        rewrite_of[i] = Some(rw);
    }
    let mut out = Vec::with_capacity(rollouts.len());
    for (i, r) in rollouts.into_iter().enumerate() {
        let p = &problems[r.problem_index];
        let rewards = match cfg.reward_mode {
            RewardMode::TokenLevel => reward::token_rewards(rm, vocab, p, &r.text, &r.tokens, r.sign)?,
            RewardMode::InstanceUniform => RewardVector::uniform(r.tokens.len(), r.sign),
        };
        let (imitation, oracle_fallback) = match rewrite_of[i].take() {
            None => (None, false),
            Some(rw) => {
                let (text, fallback) = if rw.passes(p) {
                    (rw.text, false)
                } else {
                    stats.oracle_fallbacks += 1;
                    (oracle_rewrite(p, &StepSolution::parse_text(&r.text)).rewritten.render(), true)
                };
                let tilde = vocab.encode(&text)?;
                let t = imitation_target(&r.prompt, &r.tokens, &tilde, cfg.gamma, cfg.phi)?;
                (Some(t), fallback)
            }
        };
        out.push(PreparedRollout { rollout: r, rewards, imitation, oracle_fallback });
    }
    Ok((out, stats))
}

/// One row of the metrics CSV. `train_acc` is filled on evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    #[serde(rename = "J_RL")]
    pub j_rl: f64,
    #[serde(rename = "L_IR")]
    pub l_ir: f64,
    pub mean_reward_neg: f64,
    pub mean_reward_pos: f64,
    pub mean_ratio: f64,
    pub train_acc: Option<f64>,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn params_hash(p: &Params<f32>) -> String {
    let mut h = Sha256::new();
    for v in &p.data {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Which objective `rl_step` optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Objective {
    /// Token-level clipped objective plus imitation on negatives.
    Rlmec,
    /// Sequence-level ratio with a +1/-1 reward.
    VanillaPpo,
}

pub struct TrainState {
    pub policy: Params<f32>,
    reference: Params<f32>,
    reference_hash: String,
    pub optimizer: Adam<f32>,
    pub step: usize,
    pub metrics: Vec<MetricRow>,
    /// Training-set accuracy by optimizer step, as measured during the run.
    pub acc_curve: Vec<(usize, f64)>,
}

impl TrainState {
    /// Policy and frozen reference both start from `init`.
    pub fn new(init: &Params<f32>, lr: f64) -> Self {
        TrainState {
            policy: init.clone(),
            reference_hash: params_hash(init),
            reference: init.clone(),
            optimizer: Adam::new(AdamConfig { lr, ..AdamConfig::default() }, init.len()),
            step: 0,
            metrics: Vec::new(),
            acc_curve: Vec::new(),
        }
    }

    pub fn reference(&self) -> &Params<f32> {
        &self.reference
    }

    pub fn reference_hash(&self) -> &str {
        &self.reference_hash
    }

    pub fn check_reference(&self) -> Result<(), TrainError> {
        if params_hash(&self.reference) != self.reference_hash {
            return Err(TrainError::ReferenceMutated);
        }
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One optimizer update on a batch. `J_RL` is averaged over the batch's
/// rollouts and `L_IR` over its negatives. A non-finite gradient skips the
/// update and is reported through the error.
pub fn rl_step(
    state: &mut TrainState,
    batch: &[PreparedRollout],
    cfg: &RLConfig,
    objective: Objective,
) -> Result<MetricRow, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Invalid("empty batch".into()));
    }
    let mut grads = state.policy.zeros_like();
    let rl_scale = 1.0 / batch.len() as f32;
    let mut j_rl = 0.0;
    let mut ratios = Vec::with_capacity(batch.len());
    for pr in batch {
        let (j, r) = match objective {
            Objective::Rlmec => {
                rl_gradients(&state.policy, &pr.rollout, &pr.rewards.rewards, cfg.epsilon, rl_scale, &mut grads)?
            }
            Objective::VanillaPpo => {
                let reward = if pr.rollout.sign == Sign::Positive { 1.0 } else { -1.0 };
                sequence_rl_gradients(&state.policy, &pr.rollout, reward, cfg.epsilon, rl_scale, &mut grads)?
            }
        };
        j_rl += j / batch.len() as f64;
        ratios.push(r);
    }
    let mut l_ir = 0.0;
    if objective == Objective::Rlmec && cfg.lambda_ir > 0.0 {
        let negs: Vec<&ImitationTarget> = batch.iter().filter_map(|p| p.imitation.as_ref()).collect();
        let scale = cfg.lambda_ir as f32 / negs.len().max(1) as f32;
        for t in &negs {
            l_ir += imitation_gradients(&state.policy, t, scale, &mut grads)? / negs.len() as f64;
        }
    }
    state.optimizer.step_with_lr(&mut state.policy, &grads, cfg.lr)?;
    state.step += 1;
    let neg = batch.iter().filter(|p| p.rollout.sign == Sign::Negative).flat_map(|p| p.rewards.rewards.iter().copied());
    let pos = batch.iter().filter(|p| p.rollout.sign == Sign::Positive).flat_map(|p| p.rewards.rewards.iter().copied());
    let row = MetricRow {
        step: state.step,
        j_rl,
        l_ir,
        mean_reward_neg: mean(neg),
        mean_reward_pos: mean(pos),
        mean_ratio: mean(ratios.into_iter()),
        train_acc: None,
    };
    state.metrics.push(row.clone());
    Ok(row)
}

/// Everything an RL run needs besides the trainer state.
pub struct RlData<'a> {
    pub vocab: &'a Vocab,
    pub problems: &'a [Problem],
    /// Problems for the periodic training-accuracy probe.
    pub probe: &'a [Problem],
}

/// Algorithm loop: each epoch samples fresh rollouts from the frozen
/// reference, scores them, and runs shuffled minibatch updates until
/// `max_steps`. `on_prepared` sees every scored epoch (for reward-bound
/// audits and dumps).
pub fn train_rl(
    state: &mut TrainState,
    rm: Option<&Params<f32>>,
    data: &RlData<'_>,
    cfg: &RLConfig,
    objective: Objective,
    on_prepared: &mut dyn FnMut(usize, &[PreparedRollout]),
) -> Result<(), TrainError> {
    cfg.validate()?;
    if objective == Objective::Rlmec && rm.is_none() {
        return Err(TrainError::Invalid("token-level training needs a reward model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    probe_accuracy(state, data, cfg)?;
    for epoch in 0..cfg.epochs.max(1) {
        if state.step >= cfg.max_steps {
            break;
        }
        let rollouts = collect_rollouts(
            state.reference(),
            data.vocab,
            data.problems,
            cfg.samples_per_question,
            cfg.temperature,
            cfg.max_new,
            crate::synth::instance_seed(cfg.seed, epoch as u64),
        )?;
        let mut prepared = match (objective, rm) {
            (Objective::Rlmec, Some(rm)) => prepare_rollouts(rm, data.vocab, data.problems, rollouts, cfg)?.0,
            _ => rollouts
                .into_iter()
                .map(|r| {
                    let rewards = RewardVector::uniform(r.tokens.len(), r.sign);
                    PreparedRollout { rollout: r, rewards, imitation: None, oracle_fallback: false }
                })
                .collect(),
        };
        on_prepared(epoch, &prepared);
        prepared.shuffle(&mut rng);
        for batch in prepared.chunks(cfg.batch_size) {
            if state.step >= cfg.max_steps {
                break;
            }
            rl_step(state, batch, cfg, objective)?;
            if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
                probe_accuracy(state, data, cfg)?;
            }
        }
        state.check_reference()?;
    }
    if state.acc_curve.last().map(|&(s, _)| s) != Some(state.step) {
        probe_accuracy(state, data, cfg)?;
    }
    Ok(())
}

fn probe_accuracy(state: &mut TrainState, data: &RlData<'_>, cfg: &RLConfig) -> Result<(), TrainError> {
    if data.probe.is_empty() {
        return Ok(());
    }
    let acc = greedy_accuracy(&state.policy, data.vocab, data.probe, cfg.max_new)?;
    state.acc_curve.push((state.step, acc));
    if let Some(row) = state.metrics.last_mut() {
        if row.step == state.step {
            row.train_acc = Some(acc);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RftStats {
    pub kept: usize,
    pub duplicates: usize,
    pub skipped_questions: usize,
}

/// Correct samples, deduplicated by text per question.
pub fn rft_dataset(rollouts: &[Rollout], n_problems: usize) -> (Vec<WeightedSeq>, RftStats) {
    let mut stats = RftStats::default();
    let mut seen: HashSet<(usize, &str)> = HashSet::new();
    let mut has_correct = vec![false; n_problems];
    let mut out = Vec::new();
    for r in rollouts.iter().filter(|r| r.sign == Sign::Positive) {
        has_correct[r.problem_index] = true;
        if !seen.insert((r.problem_index, r.text.as_str())) {
            stats.duplicates += 1;
            continue;
        }
        let mut tokens = r.prompt.clone();
        tokens.extend(&r.tokens);
        tokens.push(EOS);
        let n = tokens.len() - r.prompt.len();
        out.push(WeightedSeq { tokens, start: r.prompt.len(), weights: vec![1.0; n] });
    }
    stats.kept = out.len();
    stats.skipped_questions = has_correct.iter().filter(|&&c| !c).count();
    (out, stats)
}

/// Rejection-sampling fine-tuning: `k` samples per question from the initial
/// policy each epoch, supervised updates on the distinct correct ones.
pub fn train_rft(state: &mut TrainState, data: &RlData<'_>, cfg: &RLConfig) -> Result<RftStats, TrainError> {
    cfg.validate()?;
    let mut total = RftStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    probe_accuracy(state, data, cfg)?;
    for epoch in 0..cfg.epochs.max(1) {
        if state.step >= cfg.max_steps {
            break;
        }
        let rollouts = collect_rollouts(
            state.reference(),
            data.vocab,
            data.problems,
            cfg.samples_per_question,
            cfg.temperature,
            cfg.max_new,
            crate::synth::instance_seed(cfg.seed, epoch as u64),
        )?;
        let (mut seqs, stats) = rft_dataset(&rollouts, data.problems.len());
        total.kept += stats.kept;
        total.duplicates += stats.duplicates;
        total.skipped_questions += stats.skipped_questions;
        seqs.shuffle(&mut rng);
        for batch in seqs.chunks(cfg.batch_size) {
            if state.step >= cfg.max_steps {
                break;
            }
            let mut grads = state.policy.zeros_like();
            let scale = 1.0 / batch.len() as f32;
            let mut loss = 0.0;
            for s in batch {
                loss += weighted_ce_accumulate(
                    &state.policy,
                    &s.tokens,
                    s.start..s.tokens.len(),
                    &s.weights,
                    scale,
                    &mut grads,
                )? as f64;
            }
            state.optimizer.step_with_lr(&mut state.policy, &grads, cfg.lr)?;
            state.step += 1;
            state.metrics.push(MetricRow {
                step: state.step,
                j_rl: 0.0,
                l_ir: loss / batch.len() as f64,
                mean_reward_neg: 0.0,
                mean_reward_pos: 0.0,
                mean_ratio: 1.0,
                train_acc: None,
            });
            if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
                probe_accuracy(state, data, cfg)?;
            }
        }
        state.check_reference()?;
    }
    if state.acc_curve.last().map(|&(s, _)| s) != Some(state.step) {
        probe_accuracy(state, data, cfg)?;
    }
    Ok(total)
}

/// First optimizer step at which the measured accuracy reached `target`.
pub fn steps_to_accuracy(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|&&(_, a)| a >= target).map(|&(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_coefficient(1.0, 0.37, 0.3), 0.37);
        assert!((clipped_coefficient(2.0, -0.05, 0.3) + 0.10).abs() < 1e-12);
        assert!((clipped_coefficient(2.0, 0.4, 0.3) - 0.52).abs() < 1e-12);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratio(-1.3, -1.3), 1.0);
        assert!((importance_ratio(-1.0 + 2f64.ln(), -1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_shape() {
        assert!((lr_at(0, 100, 1.0, 10, 0.1) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, 100, 1.0, 10, 0.1) - (1.0 - 0.9 * 9.0 / 99.0)).abs() < 1e-12);
        assert!((lr_at(99, 100, 1.0, 10, 0.1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn imitation_weights_mark_edits() {
        let t = imitation_target(&[0, 5], &[7, 8, 9], &[7, 4, 9], 1.0, 0.1).unwrap();
        assert_eq!(t.seq.tokens, vec![0, 5, 7, 4, 9, EOS]);
        assert_eq!(t.seq.weights, vec![0.1, 1.0, 0.1, 0.1]);
        assert_eq!(t.error_tokens.into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn steps_to_accuracy_picks_first_hit() {
        let c = [(0, 0.5), (10, 0.96), (20, 0.9), (30, 0.97)];
        assert_eq!(steps_to_accuracy(&c, 0.95), Some(10));
        assert_eq!(steps_to_accuracy(&c, 0.99), None);
    }

    #[test]
    fn prepare_drops_rollouts_too_long_to_score() {
        use crate::nn::{init_params, ModelConfig};
        use crate::synth::{Family, Op};
        let vocab = Vocab::default();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            ..ModelConfig::default()
        };
        let rm = init_params::<f32>(&cfg, 3).unwrap();
        let p = Problem::new("p", Family::ArithSeen, vec![3, 5, 2], vec![Op::Add, Op::Mul]).unwrap();
        let rollout = |text: &str| Rollout {
            problem_index: 0,
            problem_id: "p".into(),
            prompt: vec![],
            tokens: vocab.encode(text).unwrap(),
            text: text.into(),
            ref_logprobs: vec![0.0; vocab.encode(text).unwrap().len()],
            sign: Sign::Positive,
            truncated: false,
        };
        let short = render_solution(&p).render();
        let long = short.repeat(12);
        let (out, stats) =
            prepare_rollouts(&rm, &vocab, &[p], vec![rollout(&long), rollout(&short)], &RLConfig::default()).unwrap();
        assert_eq!(stats.overflow_dropped, 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].rollout.text, short);
    }

    #[test]
    fn config_validation() {
        assert!(RLConfig::default().validate().is_ok());
        assert!(RLConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(RLConfig { lambda_ir: -1.0, ..Default::default() }.validate().is_err());
        assert!(RLConfig { samples_per_question: 0, ..Default::default() }.validate().is_err());
    }
}
