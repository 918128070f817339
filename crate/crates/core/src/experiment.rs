//! End-to-end runs: corpus splits, the SFT / distill / reward-model / RL
//! stages, and the on-disk layout of a run directory.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{align, edit_distance, EditKind};
use crate::codec::{CodecError, Vocab};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::nn::{
    init_params, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelError, OptimizerState, Params,
    RngState,
};
use crate::reward::{
    build_distill_set, locate_many, rewrite_many, token_rewards, DistillConfig, DistillExample, DistillStats,
    RewardError, Sign,
};
use crate::synth::{
    gen_problem_with, instance_seed, locate_first_error, random_corruption, render_solution, Family, GenOptions,
    Problem, Propagation, SolutionRecord, StepSolution, SynthError, MAX_DEPTH, MIN_DEPTH,
};
use crate::train::{
    collect_rollouts, fit_supervised, sft_examples, train_rft, train_rl, train_sft, write_metrics_csv, FitReport,
    MetricRow, Objective, PreparedRollout, RLConfig, RewardMode, RlData, SupervisedConfig, TrainError, TrainState,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Format { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ExperimentError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for it in items {
        writeln!(w, "{}", serde_json::to_string(it).expect("record serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| ExperimentError::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })?,
        );
    }
    Ok(out)
}

pub fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

// ---------------------------------------------------------------------------
// corpus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub operand_max: u32,
    pub sft_train: usize,
    pub rl_train: usize,
    pub rm_holdout: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            operand_max: 9,
            sft_train: 4000,
            rl_train: 800,
            rm_holdout: 200,
            test_seen: 300,
            test_unseen: 300,
        }
    }
}

pub const SPLITS: [&str; 5] = ["sft_train", "rl_train", "rm_holdout", "test_seen", "test_unseen"];

/// Disjoint problem splits. No question text occurs in two splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sft_train: Vec<Problem>,
    pub rl_train: Vec<Problem>,
    pub rm_holdout: Vec<Problem>,
    pub test_seen: Vec<Problem>,
    pub test_unseen: Vec<Problem>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Corpus, ExperimentError> {
        let opts = GenOptions { operand_max: cfg.operand_max };
        let mut taken: HashSet<String> = HashSet::new();
        let mut split = |tag: u64, family: Family, n: usize| -> Result<Vec<Problem>, ExperimentError> {
            let base = instance_seed(cfg.seed, tag);
            let mut out = Vec::with_capacity(n);
            let mut i = 0u64;
            while out.len() < n {
                if i > 50 * n as u64 + 1000 {
                    return Err(ExperimentError::Invalid(format!(
                        "could not draw {n} distinct problems with operand_max {}",
                        cfg.operand_max
                    )));
                }
                let s = instance_seed(base, i);
                i += 1;
                let depth = MIN_DEPTH + (s % (MAX_DEPTH - MIN_DEPTH + 1) as u64) as usize;
                let p = gen_problem_with(family, depth, s, &opts)?;
                if taken.insert(p.question.clone()) {
                    out.push(p);
                }
            }
            Ok(out)
        };
        // test splits first so that they never depend on training-set sizes
        let test_seen = split(3, Family::ArithSeen, cfg.test_seen)?;
        let test_unseen = split(4, Family::ArithUnseen, cfg.test_unseen)?;
        let rm_holdout = split(2, Family::ArithSeen, cfg.rm_holdout)?;
        let rl_train = split(1, Family::ArithSeen, cfg.rl_train)?;
        let sft_train = split(0, Family::ArithSeen, cfg.sft_train)?;
        Ok(Corpus { sft_train, rl_train, rm_holdout, test_seen, test_unseen })
    }

    pub fn split(&self, name: &str) -> Option<&[Problem]> {
        Some(match name {
            "sft_train" => &self.sft_train,
            "rl_train" => &self.rl_train,
            "rm_holdout" => &self.rm_holdout,
            "test_seen" => &self.test_seen,
            "test_unseen" => &self.test_unseen,
            _ => return None,
        })
    }

    /// Ids of every problem any stage trains on.
    pub fn train_ids(&self) -> HashSet<String> {
        self.sft_train.iter().chain(&self.rl_train).chain(&self.rm_holdout).map(|p| p.id.clone()).collect()
    }

    pub fn test_set(&self) -> Vec<Problem> {
        self.test_seen.iter().chain(&self.test_unseen).cloned().collect()
    }

    /// SHA-256 over every split's JSON lines, in split order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for name in SPLITS {
            h.update(name.as_bytes());
            h.update(b"\n");
            for p in self.split(name).expect("known split") {
                h.update(serde_json::to_string(p).expect("problem serializes").as_bytes());
                h.update(b"\n");
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for name in SPLITS {
            write_jsonl(&dir.join(format!("{name}.jsonl")), self.split(name).expect("known split"))?;
        }
        let hash_path = dir.join("hash.txt");
        fs::write(&hash_path, self.hash() + "\n").map_err(io_err(&hash_path))
    }

    pub fn load(dir: &Path) -> Result<Corpus, ExperimentError> {
        let get = |name: &str| read_jsonl::<Problem>(&dir.join(format!("{name}.jsonl")));
        Ok(Corpus {
            sft_train: get("sft_train")?,
            rl_train: get("rl_train")?,
            rm_holdout: get("rm_holdout")?,
            test_seen: get("test_seen")?,
            test_unseen: get("test_unseen")?,
        })
    }
}

// ---------------------------------------------------------------------------
// configuration

/// How reward-model training candidates are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplePlan {
    /// Questions from `sft_train` whose SFT samples become candidates.
    pub questions: usize,
    pub samples_per_question: usize,
    pub temperature: f64,
    /// Single-error corruptions of the ground truth per question.
    pub corruptions_per_question: usize,
    pub max_new: usize,
}

impl Default for SamplePlan {
    fn default() -> Self {
        SamplePlan {
            questions: 2000,
            samples_per_question: 1,
            temperature: 1.0,
            corruptions_per_question: 1,
            max_new: 160,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub sft: SupervisedConfig,
    pub sample: SamplePlan,
    pub distill: DistillConfig,
    pub rm: SupervisedConfig,
    pub rl: RLConfig,
    /// Leading RL questions used for the training-accuracy probe.
    pub probe_size: usize,
    pub eval_max_new: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig { n_heads: 4, ..ModelConfig::default() },
            sft: SupervisedConfig { lr: 6e-3, steps: 6000, warmup: 100, ..SupervisedConfig::default() },
            sample: SamplePlan::default(),
            distill: DistillConfig::default(),
            rm: SupervisedConfig { lr: 2e-3, steps: 5000, warmup: 100, ..SupervisedConfig::default() },
            rl: RLConfig::default(),
            probe_size: 256,
            eval_max_new: 160,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        self.rl.validate()?;
        if self.model.vocab_size != Vocab::default().size() {
            return Err(ExperimentError::Invalid(format!(
                "model vocab_size {} does not match the codec's {}",
                self.model.vocab_size,
                Vocab::default().size()
            )));
        }
        Ok(())
    }

    /// Same config with every stage seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.sft.seed = instance_seed(seed, 10);
        self.rm.seed = instance_seed(seed, 11);
        self.rl.seed = instance_seed(seed, 12);
        self
    }
}

// ---------------------------------------------------------------------------
// checkpoints

pub fn save_params(
    path: &Path,
    params: &Params<f32>,
    optim: Option<OptimizerState<f32>>,
    seed: u64,
) -> Result<(), ExperimentError> {
    let ck = Checkpoint {
        params: params.clone(),
        optim: optim.unwrap_or_else(|| OptimizerState::new(params.len())),
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
    };
    Ok(save_checkpoint(path, &ck)?)
}

pub fn load_params(path: &Path) -> Result<Params<f32>, ExperimentError> {
    Ok(load_checkpoint::<f32>(path)?.params)
}

pub fn write_losses_csv(path: &Path, report: &FitReport) -> Result<(), ExperimentError> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| ExperimentError::Format { path: path.into(), msg: e.to_string() })?;
    let fmt = |e: csv::Error| ExperimentError::Format { path: path.into(), msg: e.to_string() };
    w.write_record(["step", "loss", "lr", "grad_norm"]).map_err(fmt)?;
    for (i, l) in report.losses.iter().enumerate() {
        let lr = report.lrs.get(i).copied().unwrap_or(f64::NAN);
        let g = report.grad_norms.get(i).copied().unwrap_or(f64::NAN);
        w.write_record([(i + 1).to_string(), format!("{l}"), format!("{lr}"), format!("{g}")]).map_err(fmt)?;
    }
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// stages

pub fn run_sft(
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    corpus: &Corpus,
    on_step: &mut dyn FnMut(usize, &Params<f32>),
) -> Result<(Params<f32>, FitReport), ExperimentError> {
    let mut params = init_params::<f32>(&cfg.model, instance_seed(cfg.seed, 20))?;
    let report = train_sft(&mut params, vocab, &corpus.sft_train, &cfg.sft, on_step)?;
    Ok((params, report))
}

/// Where a reward-model candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CandidateSource {
    PolicySample,
    Corruption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub source: CandidateSource,
    pub problem: Problem,
    pub text: String,
}

impl Candidate {
    pub fn record(&self) -> SolutionRecord {
        let mut sol = StepSolution::parse_text(&self.text);
        sol.is_correct = locate_first_error(&self.problem, &sol).is_none();
        SolutionRecord::new(&self.problem, &sol)
    }
}

/// Policy samples plus corrupted ground truths for `problems`.
pub fn sample_candidates(
    policy: &Params<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    plan: &SamplePlan,
    seed: u64,
) -> Result<Vec<Candidate>, ExperimentError> {
    let mut out = Vec::new();
    if plan.samples_per_question > 0 {
        let rollouts =
            collect_rollouts(policy, vocab, problems, plan.samples_per_question, plan.temperature, plan.max_new, seed)?;
        out.extend(rollouts.into_iter().filter(|r| !r.truncated).map(|r| Candidate {
            source: CandidateSource::PolicySample,
            problem: problems[r.problem_index].clone(),
            text: r.text,
        }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, 1));
    for p in problems {
        for j in 0..plan.corruptions_per_question {
            let prop = if j % 2 == 0 { Propagation::Propagate } else { Propagation::LocalOnly };
            if let Some((_, bad)) = random_corruption(p, &mut rng, prop, None) {
                out.push(Candidate { source: CandidateSource::Corruption, problem: p.clone(), text: bad.render() });
            }
        }
    }
    Ok(out)
}

pub fn distill_from_candidates(
    vocab: &Vocab,
    candidates: &[Candidate],
    cfg: &DistillConfig,
) -> (Vec<DistillExample>, DistillStats) {
    let pairs: Vec<(Problem, String)> = candidates.iter().map(|c| (c.problem.clone(), c.text.clone())).collect();
    build_distill_set(vocab, &pairs, cfg)
}

/// The reward model starts from the SFT policy.
pub fn run_rm(
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    sft: &Params<f32>,
    data: &[DistillExample],
    on_step: &mut dyn FnMut(usize, &Params<f32>),
) -> Result<(Params<f32>, FitReport), ExperimentError> {
    let mut rm = sft.clone();
    let seqs = data
        .iter()
        .map(|ex| ex.encode(vocab).map(|e| crate::train::WeightedSeq::uniform(&e)))
        .collect::<Result<Vec<_>, _>>()?;
    let report = fit_supervised(&mut rm, &seqs, &cfg.rm, on_step)?;
    Ok((rm, report))
}

// ---------------------------------------------------------------------------
// reward-model probes

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RmQuality {
    pub n_wrong: usize,
    pub n_located: usize,
    pub rewrite_pass_rate: f64,
    pub locate_exact_match: f64,
    pub median_edit_rewrite: f64,
    pub median_edit_truth: f64,
}

fn median(mut xs: Vec<usize>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2] as f64
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) as f64 / 2.0
    }
}

/// Rewrite pass rate and edit distances over the wrong candidates; locate
/// exact match over all of them.
pub fn rm_quality(
    rm: &Params<f32>,
    vocab: &Vocab,
    candidates: &[Candidate],
    max_new: usize,
) -> Result<RmQuality, ExperimentError> {
    let items: Vec<(&Problem, &str)> = candidates.iter().map(|c| (&c.problem, c.text.as_str())).collect();
    let truth: Vec<Option<usize>> =
        candidates.iter().map(|c| locate_first_error(&c.problem, &StepSolution::parse_text(&c.text))).collect();
    let located = locate_many(rm, vocab, &items)?;
    let exact = located.iter().zip(&truth).filter(|(got, want)| **got == Some(**want)).count();

    let wrong: Vec<usize> = (0..candidates.len()).filter(|&i| truth[i].is_some()).collect();
    let wrong_items: Vec<(&Problem, &str)> = wrong.iter().map(|&i| items[i]).collect();
    let rewrites = rewrite_many(rm, vocab, &wrong_items, max_new)?;
    let mut pass = 0;
    let mut ed_rw = Vec::with_capacity(wrong.len());
    let mut ed_gt = Vec::with_capacity(wrong.len());
    for (&i, rw) in wrong.iter().zip(&rewrites) {
        let c = &candidates[i];
        pass += usize::from(rw.passes(&c.problem));
        let s_hat = vocab.encode(&c.text)?;
        ed_rw.push(edit_distance(&s_hat, &vocab.encode(&rw.text)?));
        ed_gt.push(edit_distance(&s_hat, &vocab.encode(&render_solution(&c.problem).render())?));
    }
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(RmQuality {
        n_wrong: wrong.len(),
        n_located: candidates.len(),
        rewrite_pass_rate: frac(pass, wrong.len()),
        locate_exact_match: frac(exact, candidates.len()),
        median_edit_rewrite: median(ed_rw),
        median_edit_truth: median(ed_gt),
    })
}

/// Byte range of each token in the decoded text.
pub fn token_char_spans(vocab: &Vocab, tokens: &[u32]) -> Vec<Range<usize>> {
    let mut pos = 0;
    tokens
        .iter()
        .map(|&t| {
            let len = vocab.symbols().get(t as usize).map_or(0, String::len);
            let r = pos..pos + len;
            pos += len;
            r
        })
        .collect()
}

/// Bytes of `corrupted` that differ from `clean`, each widened to the whole
/// number it belongs to. A deletion marks its neighbours.
pub fn corrupted_spans(clean: &str, corrupted: &str) -> Vec<bool> {
    let b = corrupted.as_bytes();
    let mut marked = vec![false; b.len()];
    let ops = align(clean.as_bytes(), b).ops;
    for (k, op) in ops.iter().enumerate() {
        match op.kind {
            EditKind::Replace | EditKind::Insert => marked[op.dst.expect("has dst")] = true,
            EditKind::Delete => {
                let before = ops[..k].iter().rev().find_map(|o| o.dst);
                let after = ops[k + 1..].iter().find_map(|o| o.dst);
                for j in before.into_iter().chain(after) {
                    marked[j] = true;
                }
            }
            EditKind::Match => {}
        }
    }
    let seeds: Vec<usize> = (0..b.len()).filter(|&j| marked[j] && b[j].is_ascii_digit()).collect();
    for j in seeds {
        let lo = (0..j).rev().take_while(|&i| b[i].is_ascii_digit()).last().unwrap_or(j);
        let hi = (j + 1..b.len()).take_while(|&i| b[i].is_ascii_digit()).last().unwrap_or(j);
        marked[lo..=hi].iter_mut().for_each(|m| *m = true);
    }
    marked
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub total: usize,
    pub hits: usize,
}

impl LocalizationReport {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// For `n` single-corruption solutions over `problems`, checks whether the
/// minimum-reward token falls on a corrupted number.
pub fn reward_localization(
    rm: &Params<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    n: usize,
    seed: u64,
) -> Result<LocalizationReport, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LocalizationReport::default();
    // draws that leave the answer correct are skipped, so walk until n cases
    for (i, p) in problems.iter().cycle().take(n * 20).enumerate() {
        if report.total == n {
            break;
        }
        let prop = if i % 2 == 0 { Propagation::Propagate } else { Propagation::LocalOnly };
        let Some((_, bad)) = random_corruption(p, &mut rng, prop, None) else { continue };
        let clean = render_solution(p).render();
        let text = bad.render();
        let tokens = vocab.encode(&text)?;
        let rv = token_rewards(rm, vocab, p, &text, &tokens, Sign::Negative)?;
        let marked = corrupted_spans(&clean, &text);
        let spans = token_char_spans(vocab, &tokens);
        report.total += 1;
        if let Some(k) = rv.argmin() {
            if spans[k].clone().any(|j| marked.get(j).copied().unwrap_or(false)) {
                report.hits += 1;
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// RL methods

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rlmec,
    /// RLMEC without the imitation term.
    NoIr,
    /// RLMEC with the sign's extreme reward on every token.
    NoTokenLevel,
    Ppo,
    Rft,
    /// Continued supervised training on the RL questions' ground truth.
    Sft,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Rlmec, Method::NoIr, Method::NoTokenLevel, Method::Ppo, Method::Rft, Method::Sft];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rlmec => "rlmec",
            Method::NoIr => "no-ir",
            Method::NoTokenLevel => "no-token-level",
            Method::Ppo => "ppo",
            Method::Rft => "rft",
            Method::Sft => "sft",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn rl_config(self, base: &RLConfig) -> RLConfig {
        let mut cfg = base.clone();
        match self {
            Method::NoIr => cfg.lambda_ir = 0.0,
            Method::NoTokenLevel => cfg.reward_mode = RewardMode::InstanceUniform,
            _ => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardAudit {
    pub negative_tokens: usize,
    pub positive_tokens: usize,
    pub violations: usize,
    pub min_negative: f64,
    pub max_negative: f64,
    pub min_positive: f64,
    pub max_positive: f64,
}

impl RewardAudit {
    pub fn observe(&mut self, batch: &[PreparedRollout]) {
        for pr in batch {
            let (lo, hi) = pr.rewards.sign.bounds();
            for &r in &pr.rewards.rewards {
                if !(lo..=hi).contains(&r) {
                    self.violations += 1;
                }
                let (n, min, max) = match pr.rewards.sign {
                    Sign::Negative => (&mut self.negative_tokens, &mut self.min_negative, &mut self.max_negative),
                    Sign::Positive => (&mut self.positive_tokens, &mut self.min_positive, &mut self.max_positive),
                };
                if *n == 0 {
                    *min = r;
                    *max = r;
                } else {
                    *min = min.min(r);
                    *max = max.max(r);
                }
                *n += 1;
            }
        }
    }
}

/// Per-token rewards of one rollout, for the heatmap dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub problem_id: String,
    pub sign: Sign,
    pub tokens: Vec<String>,
    pub rewards: Vec<f64>,
}

pub const HEATMAP_ROWS: usize = 8;

fn heatmap_rows(vocab: &Vocab, batch: &[PreparedRollout]) -> Vec<HeatmapRow> {
    batch
        .iter()
        .filter(|p| p.rollout.sign == Sign::Negative)
        .take(HEATMAP_ROWS)
        .map(|p| HeatmapRow {
            problem_id: p.rollout.problem_id.clone(),
            sign: p.rollout.sign,
            tokens: p.rollout.tokens.iter().map(|&t| vocab.symbols()[t as usize].clone()).collect(),
            rewards: p.rewards.rewards.clone(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub policy: Params<f32>,
    pub metrics: Vec<MetricRow>,
    pub acc_curve: Vec<(usize, f64)>,
    pub audit: RewardAudit,
    pub heatmap: Vec<HeatmapRow>,
}

/// Trains one method from `init` on the RL split. `seed` replaces the RL
/// config's seed.
pub fn run_method(
    method: Method,
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    corpus: &Corpus,
    init: &Params<f32>,
    rm: Option<&Params<f32>>,
    seed: u64,
) -> Result<MethodRun, ExperimentError> {
    let mut rl = method.rl_config(&cfg.rl);
    rl.seed = seed;
    let probe = &corpus.rl_train[..cfg.probe_size.min(corpus.rl_train.len())];
    let data = RlData { vocab, problems: &corpus.rl_train, probe };
    let mut state = TrainState::new(init, rl.lr);
    let mut audit = RewardAudit::default();
    let mut heatmap = Vec::new();
    match method {
        Method::Rlmec | Method::NoIr | Method::NoTokenLevel => {
            let rm = rm.ok_or_else(|| ExperimentError::Invalid(format!("{} needs a reward model", method.name())))?;
            train_rl(&mut state, Some(rm), &data, &rl, Objective::Rlmec, &mut |epoch, batch| {
                audit.observe(batch);
                if epoch == 0 {
                    heatmap = heatmap_rows(vocab, batch);
                }
            })?;
        }
        Method::Ppo => {
            train_rl(&mut state, None, &data, &rl, Objective::VanillaPpo, &mut |_, _| {})?;
        }
        Method::Rft => {
            train_rft(&mut state, &data, &rl)?;
        }
        Method::Sft => {
            let seqs = sft_examples(vocab, &corpus.rl_train)?;
            let sup = SupervisedConfig {
                lr: rl.lr,
                batch_size: rl.batch_size,
                steps: rl.max_steps,
                warmup: 0,
                final_lr_frac: 1.0,
                clip_norm: 1.0,
                seed,
            };
            let mut curve = vec![(0, crate::train::greedy_accuracy(init, vocab, probe, rl.max_new)?)];
            let mut policy = init.clone();
            let report = fit_supervised(&mut policy, &seqs, &sup, &mut |step, p| {
                if rl.eval_every > 0 && (step + 1) % rl.eval_every == 0 {
                    let acc = crate::train::greedy_accuracy(p, vocab, probe, rl.max_new).unwrap_or(0.0);
                    curve.push((step + 1, acc));
                }
            })?;
            state.policy = policy;
            state.step = report.losses.len();
            state.metrics = report
                .losses
                .iter()
                .enumerate()
                .map(|(i, &l)| MetricRow {
                    step: i + 1,
                    j_rl: 0.0,
                    l_ir: l,
                    mean_reward_neg: 0.0,
                    mean_reward_pos: 0.0,
                    mean_ratio: 1.0,
                    train_acc: curve.iter().find(|c| c.0 == i + 1).map(|c| c.1),
                })
                .collect();
            if let Some(o) = report.optimizer {
                state.optimizer.state = o;
            }
            state.acc_curve = curve;
        }
    }
    Ok(MethodRun {
        method,
        seed,
        policy: state.policy,
        metrics: state.metrics,
        acc_curve: state.acc_curve,
        audit,
        heatmap,
    })
}

// ---------------------------------------------------------------------------
// evaluation summaries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub name: String,
    pub seen_accuracy: f64,
    pub unseen_accuracy: f64,
    pub mean_first_error_distance: Option<f64>,
    pub report: EvalReport,
}

/// Evaluates on both test splits. First-error statistics cover the seen split.
pub fn evaluate_policy(
    name: &str,
    params: &Params<f32>,
    vocab: &Vocab,
    corpus: &Corpus,
    max_new: usize,
) -> Result<EvalSummary, ExperimentError> {
    let report = evaluate(params, vocab, &corpus.test_set(), &corpus.train_ids(), max_new)?;
    let seen_only =
        crate::eval::summarize(report.decodes.iter().filter(|d| d.family == Family::ArithSeen).cloned().collect());
    Ok(EvalSummary {
        name: name.to_string(),
        seen_accuracy: report.accuracy.get(&Family::ArithSeen).copied().unwrap_or(0.0),
        unseen_accuracy: report.accuracy.get(&Family::ArithUnseen).copied().unwrap_or(0.0),
        mean_first_error_distance: seen_only.first_error_histogram.mean_distance(),
        report,
    })
}

// ---------------------------------------------------------------------------
// run directory

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, ExperimentError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(RunDir { root })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn sft_ckpt(&self) -> PathBuf {
        self.root.join("sft.ckpt")
    }
    pub fn sft_loss(&self) -> PathBuf {
        self.root.join("sft_loss.csv")
    }
    pub fn candidates(&self) -> PathBuf {
        self.root.join("candidates.jsonl")
    }
    pub fn distill(&self) -> PathBuf {
        self.root.join("distill.jsonl")
    }
    pub fn distill_stats(&self) -> PathBuf {
        self.root.join("distill_stats.json")
    }
    pub fn rm_ckpt(&self) -> PathBuf {
        self.root.join("rm.ckpt")
    }
    pub fn rm_loss(&self) -> PathBuf {
        self.root.join("rm_loss.csv")
    }
    pub fn run(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("{}-s{seed}", method.name()))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Writes the policy checkpoint, metrics, accuracy curve, reward audit and
    /// heatmap of one method run.
    pub fn save_method_run(
        &self,
        run: &MethodRun,
        optim: Option<OptimizerState<f32>>,
    ) -> Result<PathBuf, ExperimentError> {
        let dir = self.run(run.method, run.seed);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_params(&dir.join("policy.ckpt"), &run.policy, optim, run.seed)?;
        write_metrics_csv(&dir.join("metrics.csv"), &run.metrics)?;
        write_json(&dir.join("acc_curve.json"), &run.acc_curve)?;
        write_json(&dir.join("reward_audit.json"), &run.audit)?;
        write_json(&dir.join("heatmap.json"), &run.heatmap)?;
        Ok(dir)
    }
}

/// Hashes of every artifact in a run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub corpus_hash: String,
    /// Relative path to SHA-256, sorted by path.
    pub artifacts: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn collect(dir: &RunDir, seed: u64) -> Result<Self, ExperimentError> {
        let corpus_hash = Corpus::load(&dir.corpus())?.hash();
        let mut artifacts = std::collections::BTreeMap::new();
        let mut stack = vec![dir.root.clone()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).map_err(io_err(&d))? {
                let path = entry.map_err(io_err(&d))?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path != dir.manifest() {
                    let rel = path.strip_prefix(&dir.root).expect("inside root").to_string_lossy().replace('\\', "/");
                    artifacts.insert(rel, sha256_file(&path)?);
                }
            }
        }
        Ok(RunManifest { seed, corpus_hash, artifacts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            seed: 3,
            operand_max: 9,
            sft_train: 40,
            rl_train: 10,
            rm_holdout: 10,
            test_seen: 10,
            test_unseen: 10,
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let c = Corpus::generate(&small()).unwrap();
        let mut seen = HashSet::new();
        for name in SPLITS {
            let s = c.split(name).unwrap();
            for p in s {
                assert!(seen.insert(p.question.clone()), "{} repeated", p.question);
            }
        }
        assert_eq!(c.sft_train.len(), 40);
        assert!(c.test_unseen.iter().all(|p| p.family == Family::ArithUnseen));
        assert!(c.test_seen.iter().all(|p| !c.train_ids().contains(&p.id)));
    }

    #[test]
    fn corpus_hash_is_stable_and_sensitive() {
        let a = Corpus::generate(&small()).unwrap();
        let b = Corpus::generate(&small()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Corpus::generate(&CorpusConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let a = Corpus::generate(&small()).unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn corrupted_number_is_marked_whole() {
        let m = corrupted_spans("a 15 b 7", "a 18 b 7");
        let got: Vec<usize> = (0..m.len()).filter(|&i| m[i]).collect();
        assert_eq!(got, vec![2, 3]);
        let m = corrupted_spans("x 15 y", "x 5 y");
        assert!(m[2]);
        assert!(!m[0] && !m[4]);
    }

    #[test]
    fn token_spans_follow_symbol_lengths() {
        let v = Vocab::default();
        let toks = v.encode("ab 12").unwrap();
        let spans = token_char_spans(&v, &toks);
        assert_eq!(spans.last().unwrap().end, 5);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::NoIr.rl_config(&RLConfig::default()).lambda_ir, 0.0);
        assert_eq!(Method::NoTokenLevel.rl_config(&RLConfig::default()).reward_mode, RewardMode::InstanceUniform);
    }

    #[test]
    fn audit_counts_violations() {
        use crate::reward::RewardVector;
        use crate::train::Rollout;
        let r = Rollout {
            problem_index: 0,
            problem_id: "x".into(),
            prompt: vec![0],
            tokens: vec![5, 6],
            text: String::new(),
            ref_logprobs: vec![0.0; 2],
            sign: Sign::Negative,
            truncated: false,
        };
        let mut rewards = RewardVector::from_probs(vec![0.1, 0.9], Sign::Negative);
        let mut audit = RewardAudit::default();
        let ok =
            PreparedRollout { rollout: r.clone(), rewards: rewards.clone(), imitation: None, oracle_fallback: false };
        audit.observe(&[ok]);
        assert_eq!((audit.negative_tokens, audit.violations), (2, 0));
        rewards.rewards[0] = -0.2;
        audit.observe(&[PreparedRollout { rollout: r, rewards, imitation: None, oracle_fallback: false }]);
        assert_eq!(audit.violations, 1);
        assert_eq!(audit.min_negative, -0.2);
    }
}
