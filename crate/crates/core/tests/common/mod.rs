#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlmec::nn::{init_params, ModelConfig, Params, Precision};

/// A small f64 model with weights spread wider than the default init so that
/// logits are far from uniform.
pub fn tiny_f64(seed: u64) -> Params<f64> {
    let cfg = ModelConfig {
        vocab_size: 95,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_context: 64,
        precision: Precision::TestF64,
    };
    let mut p = init_params::<f64>(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for x in p.data.iter_mut() {
        *x += rng.gen_range(-0.15..0.15);
    }
    p
}

/// Coordinates that can influence a forward pass over `tokens`: everything
/// except embedding rows of absent tokens and positions past the input.
pub fn live_coordinates(p: &Params<f64>, tokens: &[u32]) -> Vec<usize> {
    let d = p.cfg.d_model;
    let lay = &p.layout;
    (0..p.len())
        .filter(|&i| {
            if lay.tok_emb.contains(&i) {
                let row = (i - lay.tok_emb.start) / d;
                tokens.contains(&(row as u32))
            } else if lay.pos_emb.contains(&i) {
                (i - lay.pos_emb.start) / d < tokens.len()
            } else {
                true
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FdResult {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl FdResult {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// Central differences of `f` at `n` random coordinates from `pool`, compared
/// with `analytic` by relative error. Pairs where both sides are below 1e-10
/// in magnitude count as agreeing.
pub fn fd_check(
    params: &Params<f64>,
    analytic: &Params<f64>,
    f: &dyn Fn(&Params<f64>) -> f64,
    pool: &[usize],
    n: usize,
    seed: u64,
    tol: f64,
) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut res = FdResult { checked: 0, passed: 0, worst: 0.0 };
    let mut p = params.clone();
    for _ in 0..n {
        let i = pool[rng.gen_range(0..pool.len())];
        let x0 = p.data[i];
        p.data[i] = x0 + h;
        let fp = f(&p);
        p.data[i] = x0 - h;
        let fm = f(&p);
        p.data[i] = x0;
        let num = (fp - fm) / (2.0 * h);
        let ana = analytic.data[i];
        let scale = num.abs().max(ana.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (num - ana).abs() / scale };
        res.checked += 1;
        res.worst = res.worst.max(rel);
        if rel <= tol {
            res.passed += 1;
        }
    }
    res
}
