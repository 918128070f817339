mod common;

use common::{fd_check, live_coordinates, tiny_f64};
use rlmec::nn::{forward, weighted_ce_loss_and_grad, Params};
use rlmec::reward::Sign;
use rlmec::train::{
    clipped_coefficient, imitation_gradients, imitation_target, importance_ratio, rl_gradients, sequence_rl_gradients,
    Rollout,
};

const COORDS: usize = 200;
const TOL: f64 = 1e-5;

fn tokens(n: usize, salt: u32) -> Vec<u32> {
    (0..n as u32).map(|i| 4 + (i * 17 + salt * 5) % 90).collect()
}

#[test]
fn weighted_ce_matches_finite_differences() {
    let p = tiny_f64(1);
    let toks = tokens(24, 1);
    let span = 10..24;
    let w: Vec<f64> = (0..14).map(|i| if i % 4 == 0 { 1.0 } else { 0.1 }).collect();
    let (_, g) = weighted_ce_loss_and_grad(&p, &toks, span.clone(), &w).unwrap();
    let f = |q: &Params<f64>| weighted_ce_loss_and_grad(q, &toks, span.clone(), &w).unwrap().0;
    let r = fd_check(&p, &g, &f, &live_coordinates(&p, &toks), COORDS, 7, TOL);
    assert!(r.pass_rate() >= 0.99, "{r:?}");
}

#[test]
fn imitation_loss_matches_finite_differences() {
    let p = tiny_f64(2);
    let prompt = tokens(9, 2);
    let sample = tokens(12, 3);
    let mut rewrite = sample.clone();
    rewrite[4] = 40;
    rewrite.insert(7, 41);
    let t = imitation_target(&prompt, &sample, &rewrite, 1.0, 0.1).unwrap();
    assert!(!t.error_tokens.is_empty());
    let mut g = p.zeros_like();
    imitation_gradients(&p, &t, 1.0, &mut g).unwrap();
    let f = |q: &Params<f64>| imitation_gradients(q, &t, 1.0, &mut q.zeros_like()).unwrap();
    let r = fd_check(&p, &g, &f, &live_coordinates(&p, &t.seq.tokens), COORDS, 8, TOL);
    assert!(r.pass_rate() >= 0.99, "{r:?}");
}

fn rollout(p: &Params<f64>) -> (Rollout, Vec<f64>) {
    let prompt = tokens(8, 4);
    let toks = tokens(14, 5);
    let mut input = prompt.clone();
    input.extend(&toks);
    let tr = forward(p, &input).unwrap();
    // reference log-probs offset so that some ratios fall outside the clip range
    let ref_lp: Vec<f64> =
        (0..toks.len()).map(|j| tr.token_logprob(prompt.len() + j) + [0.0, 0.5, -0.5, 0.1][j % 4]).collect();
    let rewards: Vec<f64> = (0..toks.len()).map(|j| -0.1 * ((j % 3) as f64) / 2.0).collect();
    let r = Rollout {
        problem_index: 0,
        problem_id: "g".into(),
        prompt,
        tokens: toks,
        text: String::new(),
        ref_logprobs: ref_lp,
        sign: Sign::Negative,
        truncated: false,
    };
    (r, rewards)
}

#[test]
fn token_level_objective_matches_finite_differences() {
    let p = tiny_f64(3);
    let (r, rewards) = rollout(&p);
    let eps = 0.3;
    let mut g = p.zeros_like();
    rl_gradients(&p, &r, &rewards, eps, 1.0, &mut g).unwrap();
    // coefficients frozen at the current parameters
    let mut input = r.prompt.clone();
    input.extend(&r.tokens);
    let p0 = r.prompt.len();
    let tr = forward(&p, &input).unwrap();
    let coeff: Vec<f64> = (0..r.tokens.len())
        .map(|j| clipped_coefficient(importance_ratio(tr.token_logprob(p0 + j), r.ref_logprobs[j]), rewards[j], eps))
        .collect();
    let f = |q: &Params<f64>| {
        let t = forward(q, &input).unwrap();
        -(0..coeff.len()).map(|j| coeff[j] * t.token_logprob(p0 + j)).sum::<f64>()
    };
    let res = fd_check(&p, &g, &f, &live_coordinates(&p, &input), COORDS, 9, TOL);
    assert!(res.pass_rate() >= 0.99, "{res:?}");
}

#[test]
fn sequence_objective_matches_finite_differences() {
    let p = tiny_f64(4);
    let (r, _) = rollout(&p);
    let mut g = p.zeros_like();
    let (_, ratio) = sequence_rl_gradients(&p, &r, -1.0, 0.3, 1.0, &mut g).unwrap();
    let coeff = clipped_coefficient(ratio, -1.0, 0.3);
    let mut input = r.prompt.clone();
    input.extend(&r.tokens);
    let p0 = r.prompt.len();
    let f = |q: &Params<f64>| {
        let t = forward(q, &input).unwrap();
        -coeff * (0..r.tokens.len()).map(|j| t.token_logprob(p0 + j)).sum::<f64>()
    };
    let res = fd_check(&p, &g, &f, &live_coordinates(&p, &input), 100, 10, TOL);
    assert!(res.pass_rate() >= 0.99, "{res:?}");
}
