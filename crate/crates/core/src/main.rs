use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use rlmec::codec::Vocab;
use rlmec::experiment::{
    distill_from_candidates, evaluate_policy, load_params, read_jsonl, run_method, run_rm, run_sft, sample_candidates,
    save_params, write_json, write_jsonl, write_losses_csv, Candidate, Corpus, ExperimentConfig, ExperimentError,
    Method, RunDir, RunManifest,
};
use rlmec::reward::{read_distill_jsonl, write_distill_jsonl};
use rlmec::synth::instance_seed;

#[derive(Parser)]
#[command(
    name = "rlmec",
    version,
    about = "Token-level RL with a minimum-editing reward model on synthetic arithmetic"
)]
struct Cli {
    /// JSON experiment config; defaults to <out>/config.json, then built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the config seed (and every stage seed derived from it)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus splits
    GenTasks,
    /// Supervised fine-tuning on the seen-family training split
    Sft,
    /// Sample SFT solutions and corrupted ground truths as reward-model candidates
    Sample,
    /// Build the locate/rewrite distillation set from the candidates
    Distill,
    /// Train the generative reward model, starting from the SFT checkpoint
    TrainRm,
    /// Token-level RL with imitation regularization
    TrainRlmec {
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
    },
    /// Baselines trained on the same RL questions
    TrainBaseline {
        #[arg(value_enum)]
        kind: Baseline,
    },
    /// Greedy evaluation on the test splits
    Eval {
        /// Checkpoint to evaluate; default: SFT and every finished run
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Charts and summaries under <out>/report
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoIr,
    NoTokenLevel,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Sft,
    Rft,
    Ppo,
}

fn config(cli: &Cli, dir: &RunDir) -> Result<ExperimentConfig, ExperimentError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if dir.config().exists() => ExperimentConfig::load(&dir.config())?,
        None => ExperimentConfig::default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_method(
    method: Method,
    cfg: &ExperimentConfig,
    dir: &RunDir,
    vocab: &Vocab,
) -> Result<serde_json::Value, ExperimentError> {
    let corpus = Corpus::load(&dir.corpus())?;
    let sft = load_params(&dir.sft_ckpt())?;
    let rm = match method {
        Method::Rlmec | Method::NoIr | Method::NoTokenLevel => Some(load_params(&dir.rm_ckpt())?),
        _ => None,
    };
    let mut run = run_method(method, cfg, vocab, &corpus, &sft, rm.as_ref(), cfg.rl.seed)?;
    run.seed = cfg.seed;
    let out = dir.save_method_run(&run, None)?;
    Ok(json!({
        "method": method.name(),
        "dir": out,
        "steps": run.metrics.len(),
        "final_train_acc": run.acc_curve.last().map(|c| c.1),
        "reward_violations": run.audit.violations,
    }))
}

fn execute(cli: &Cli) -> Result<serde_json::Value, ExperimentError> {
    let dir = RunDir::new(&cli.out)?;
    let cfg = config(cli, &dir)?;
    write_json(&dir.config(), &cfg)?;
    let vocab = Vocab::default();
    let result = match &cli.command {
        Command::GenTasks => {
            let corpus = Corpus::generate(&cfg.corpus)?;
            corpus.save(&dir.corpus())?;
            json!({ "corpus_hash": corpus.hash(), "sft_train": corpus.sft_train.len(), "rl_train": corpus.rl_train.len(),
                    "test_seen": corpus.test_seen.len(), "test_unseen": corpus.test_unseen.len() })
        }
        Command::Sft => {
            let corpus = Corpus::load(&dir.corpus())?;
            let (params, report) = run_sft(&cfg, &vocab, &corpus, &mut |_, _| {})?;
            save_params(&dir.sft_ckpt(), &params, report.optimizer.clone(), cfg.sft.seed)?;
            write_losses_csv(&dir.sft_loss(), &report)?;
            json!({ "steps": report.losses.len(), "final_loss": report.losses.last() })
        }
        Command::Sample => {
            let corpus = Corpus::load(&dir.corpus())?;
            let sft = load_params(&dir.sft_ckpt())?;
            let n = cfg.sample.questions.min(corpus.sft_train.len());
            let cands =
                sample_candidates(&sft, &vocab, &corpus.sft_train[..n], &cfg.sample, instance_seed(cfg.seed, 30))?;
            write_jsonl(&dir.candidates(), &cands)?;
            let records: Vec<_> = cands.iter().map(Candidate::record).collect();
            write_jsonl(&dir.root.join("candidates_records.jsonl"), &records)?;
            json!({ "candidates": cands.len(), "wrong": records.iter().filter(|r| !r.label).count() })
        }
        Command::Distill => {
            let cands: Vec<Candidate> = read_jsonl(&dir.candidates())?;
            let (set, stats) = distill_from_candidates(&vocab, &cands, &cfg.distill);
            write_distill_jsonl(&dir.distill(), &set)?;
            write_json(&dir.distill_stats(), &stats)?;
            json!({ "examples": set.len(), "stats": stats })
        }
        Command::TrainRm => {
            let sft = load_params(&dir.sft_ckpt())?;
            let data = read_distill_jsonl(&dir.distill())?;
            let (rm, report) = run_rm(&cfg, &vocab, &sft, &data, &mut |_, _| {})?;
            save_params(&dir.rm_ckpt(), &rm, report.optimizer.clone(), cfg.rm.seed)?;
            write_losses_csv(&dir.rm_loss(), &report)?;
            json!({ "examples": data.len(), "steps": report.losses.len(), "final_loss": report.losses.last() })
        }
        Command::TrainRlmec { ablation } => {
            let method = match ablation {
                None => Method::Rlmec,
                Some(Ablation::NoIr) => Method::NoIr,
                Some(Ablation::NoTokenLevel) => Method::NoTokenLevel,
            };
            train_method(method, &cfg, &dir, &vocab)?
        }
        Command::TrainBaseline { kind } => {
            let method = match kind {
                Baseline::Sft => Method::Sft,
                Baseline::Rft => Method::Rft,
                Baseline::Ppo => Method::Ppo,
            };
            train_method(method, &cfg, &dir, &vocab)?
        }
        Command::Eval { checkpoint, name } => {
            let corpus = Corpus::load(&dir.corpus())?;
            let targets: Vec<(String, PathBuf)> = match checkpoint {
                Some(p) => vec![(name.clone().unwrap_or_else(|| "checkpoint".into()), p.clone())],
                None => {
                    let mut t = vec![("sft".to_string(), dir.sft_ckpt())];
                    for m in Method::ALL {
                        let p = dir.run(m, cfg.seed).join("policy.ckpt");
                        if p.exists() {
                            t.push((format!("{}-s{}", m.name(), cfg.seed), p));
                        }
                    }
                    t
                }
            };
            std::fs::create_dir_all(dir.eval_dir())
                .map_err(|source| ExperimentError::Io { path: dir.eval_dir(), source })?;
            let mut out = serde_json::Map::new();
            for (name, path) in targets {
                let params = load_params(&path)?;
                let s = evaluate_policy(&name, &params, &vocab, &corpus, cfg.eval_max_new)?;
                write_json(&dir.eval_dir().join(format!("{name}.json")), &s)?;
                out.insert(
                    name,
                    json!({ "seen": s.seen_accuracy, "unseen": s.unseen_accuracy,
                                         "mean_first_error_distance": s.mean_first_error_distance }),
                );
            }
            serde_json::Value::Object(out)
        }
        Command::Report => {
            let files = rlmec::report::write_report(&dir)?;
            json!({ "files": files })
        }
    };
    if dir.corpus().join("hash.txt").exists() {
        write_json(&dir.manifest(), &RunManifest::collect(&dir, cfg.seed)?)?;
    }
    Ok(result)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{}", json!({ "error": "--threads must be at least 1" }));
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
