use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn rlmec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlmec")).arg("--out").arg(dir).args(args).output().unwrap()
}

const TINY: &str = r#"{"corpus":{"sft_train":48,"rl_train":8,"rm_holdout":8,"test_seen":10,"test_unseen":10},
  "model":{"d_model":32,"n_heads":2,"d_ff":64,"n_layers":1},
  "sft":{"steps":20,"batch_size":4},
  "sample":{"questions":12,"max_new":60},
  "rm":{"steps":8,"batch_size":4},
  "rl":{"max_steps":4,"samples_per_question":2,"batch_size":4,"max_new":60,"eval_every":2},
  "eval_max_new":60}"#;

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(rlmec(tmp.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(rlmec(tmp.path(), &["train-baseline", "dpo"]).status.code(), Some(2));
    assert_eq!(rlmec(tmp.path(), &["--threads", "x", "report"]).status.code(), Some(2));
}

#[test]
fn failures_print_a_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rlmec(tmp.path(), &["sft"]);
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v["error"].as_str().unwrap().contains("sft_train.jsonl"));
}

#[test]
fn every_subcommand_runs_on_a_tiny_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let dir = tmp.path().join("run");
    let t = Instant::now();
    let cmds: [&[&str]; 13] = [
        &["gen-tasks"],
        &["sft"],
        &["sample"],
        &["distill"],
        &["train-rm"],
        &["train-rlmec"],
        &["train-rlmec", "--ablation", "no-ir"],
        &["train-rlmec", "--ablation", "no-token-level"],
        &["train-baseline", "sft"],
        &["train-baseline", "rft"],
        &["train-baseline", "ppo"],
        &["eval"],
        &["report"],
    ];
    for args in cmds {
        let mut full = vec!["--config", cfg.to_str().unwrap(), "--seed", "5", "--threads", "1"];
        full.extend_from_slice(args);
        let out = rlmec(&dir, &full);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(v.is_object(), "{args:?}");
    }
    assert!(t.elapsed().as_secs() < 300);
    for f in [
        "corpus/hash.txt",
        "sft.ckpt",
        "rm.ckpt",
        "distill.jsonl",
        "runs/rlmec-s5/metrics.csv",
        "eval/sft.json",
        "report/train_acc.svg",
        "report/first_error.svg",
        "report/summary.csv",
        "manifest.json",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let header = std::fs::read_to_string(dir.join("runs/rlmec-s5/metrics.csv")).unwrap();
    assert!(header.starts_with("step,J_RL,L_IR,mean_reward_neg,mean_reward_pos,mean_ratio,train_acc\n"));
    let summary = std::fs::read_to_string(dir.join("report/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 7);

    // the report is a pure function of the directory
    let before: Vec<Vec<u8>> =
        ["train_acc.svg", "first_error.svg", "summary.csv", "reward_heatmap.json", "reward_neg.svg"]
            .iter()
            .map(|f| std::fs::read(dir.join("report").join(f)).unwrap())
            .collect();
    let out = rlmec(&dir, &["--config", cfg.to_str().unwrap(), "--seed", "5", "report"]);
    assert!(out.status.success());
    for (i, f) in
        ["train_acc.svg", "first_error.svg", "summary.csv", "reward_heatmap.json", "reward_neg.svg"].iter().enumerate()
    {
        assert_eq!(std::fs::read(dir.join("report").join(f)).unwrap(), before[i], "{f} changed");
    }
}
