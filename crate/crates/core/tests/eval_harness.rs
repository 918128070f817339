use std::collections::{HashMap, HashSet};

use rlmec::codec::Vocab;
use rlmec::eval::{evaluate, EvalError};
use rlmec::experiment::{Corpus, CorpusConfig};
use rlmec::nn::{init_params, ModelConfig};
use rlmec::synth::Family;
use rlmec::train::{train_sft, SupervisedConfig};

fn corpus() -> Corpus {
    Corpus::generate(&CorpusConfig {
        seed: 9,
        sft_train: 6,
        rl_train: 4,
        rm_holdout: 4,
        test_seen: 40,
        test_unseen: 40,
        ..CorpusConfig::default()
    })
    .unwrap()
}

#[test]
fn random_init_scores_near_zero() {
    let c = corpus();
    let p = init_params::<f32>(&ModelConfig::default(), 1).unwrap();
    let r = evaluate(&p, &Vocab::default(), &c.test_set(), &c.train_ids(), 160).unwrap();
    assert_eq!(r.n_evaluated, 80);
    assert!(r.accuracy[&Family::ArithSeen] < 0.01);
    assert!(r.accuracy[&Family::ArithUnseen] < 0.01);
    assert_eq!(r.first_error_histogram.total(), 80);
}

#[test]
fn memorized_set_scores_one_and_order_does_not_matter() {
    let c = corpus();
    let vocab = Vocab::default();
    let cfg = ModelConfig { d_model: 32, n_heads: 2, d_ff: 128, ..ModelConfig::default() };
    let mut p = init_params::<f32>(&cfg, 2).unwrap();
    let sup =
        SupervisedConfig { lr: 5e-3, batch_size: 6, steps: 600, warmup: 20, final_lr_frac: 0.1, ..Default::default() };
    train_sft(&mut p, &vocab, &c.sft_train, &sup, &mut |_, _| {}).unwrap();
    let r = evaluate(&p, &vocab, &c.sft_train, &HashSet::new(), 160).unwrap();
    assert_eq!(r.accuracy[&Family::ArithSeen], 1.0);
    assert!(r.first_error_histogram.counts.is_empty());

    let fwd = evaluate(&p, &vocab, &c.test_seen, &c.train_ids(), 160).unwrap();
    let mut rev = c.test_seen.clone();
    rev.reverse();
    let bwd = evaluate(&p, &vocab, &rev, &c.train_ids(), 160).unwrap();
    assert_eq!(fwd.accuracy, bwd.accuracy);
    assert_eq!(fwd.first_error_histogram, bwd.first_error_histogram);
    let by_id: HashMap<&str, &str> = fwd.decodes.iter().map(|d| (d.problem_id.as_str(), d.text.as_str())).collect();
    assert!(bwd.decodes.iter().all(|d| by_id[d.problem_id.as_str()] == d.text));
}

#[test]
fn overlapping_test_set_is_refused() {
    let c = corpus();
    let p = init_params::<f32>(&ModelConfig::default(), 1).unwrap();
    let mut test = c.test_seen.clone();
    test.push(c.rl_train[0].clone());
    match evaluate(&p, &Vocab::default(), &test, &c.train_ids(), 16) {
        Err(EvalError::Overlap { count, first }) => {
            assert_eq!(count, 1);
            assert_eq!(first, c.rl_train[0].id);
        }
        other => panic!("expected overlap error, got {:?}", other.map(|r| r.n_evaluated)),
    }
}
