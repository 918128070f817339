//! Incremental decoding with per-sequence key/value caches. Sequences in a
//! batch advance together so each layer runs as one gemm over all of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{add_bias, gemm, log_softmax_row, Mat, MatMut, Scalar};
use super::model::{check_tokens, forward, gelu, layer_norm};
use super::params::Params;
use super::ModelError;
use crate::codec::EOS;

/// Keys and values for every layer, one `d_model` row per position.
struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// Values below `1e-6` mean greedy (argmax, lowest id on ties).
    pub temperature: f64,
    pub max_new: usize,
}

impl DecodeOptions {
    pub fn greedy(max_new: usize) -> Self {
        DecodeOptions { temperature: 0.0, max_new }
    }
}

/// Generated continuation. `tokens` excludes EOS; `logprobs[i]` is the
/// unscaled model log-probability of `tokens[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub eos_logprob: Option<f64>,
    /// True when decoding stopped because the context window was full.
    pub overflow: bool,
}

impl Generation {
    pub fn hit_eos(&self) -> bool {
        self.eos_logprob.is_some()
    }
}

fn prefill<T: Scalar>(params: &Params<T>, prompt: &[u32]) -> Result<(KvCache<T>, Vec<T>), ModelError> {
    let trace = forward(params, prompt)?;
    let d = params.cfg.d_model;
    let mut cache = KvCache { k: Vec::new(), v: Vec::new(), len: prompt.len() };
    for l in 0..params.cfg.n_layers {
        let (k, v) = trace.layer_kv(l, d);
        cache.k.push(k);
        cache.v.push(v);
    }
    Ok((cache, trace.row(prompt.len() - 1).to_vec()))
}

/// Feeds one token to each cache and returns next-token logprobs, `B x V`.
fn step_batch<T: Scalar>(params: &Params<T>, caches: &mut [&mut KvCache<T>], tokens: &[u32]) -> Vec<T> {
    let cfg = &params.cfg;
    let lay = &params.layout;
    let b = tokens.len();
    let (d, nh, dh, f, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
    let (zero, one) = (T::zero(), T::one());
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    let te = params.slice(&lay.tok_emb);
    let pe = params.slice(&lay.pos_emb);
    let mut x = vec![zero; b * d];
    for (i, (&tok, c)) in tokens.iter().zip(caches.iter()).enumerate() {
        let (tok, pos) = (tok as usize, c.len);
        for j in 0..d {
            x[i * d + j] = te[tok * d + j] + pe[pos * d + j];
        }
    }

    let mut scores = Vec::new();
    for (l, ll) in lay.layers.iter().enumerate() {
        let (_, _, h1) = layer_norm(&x, b, d, params.slice(&ll.ln1_g), params.slice(&ll.ln1_b));
        let mut qkv = vec![zero; b * 3 * d];
        gemm(
            one,
            Mat::new(&h1, b, d),
            Mat::new(params.slice(&ll.w_qkv), d, 3 * d),
            zero,
            MatMut::new(&mut qkv, b, 3 * d),
        );
        add_bias(&mut qkv, params.slice(&ll.b_qkv));

        let mut att = vec![zero; b * d];
        for (i, c) in caches.iter_mut().enumerate() {
            let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
            c.k[l].extend_from_slice(&row[d..2 * d]);
            c.v[l].extend_from_slice(&row[2 * d..]);
            let n = c.len + 1;
            for h in 0..nh {
                let q = &row[h * dh..(h + 1) * dh];
                scores.clear();
                scores.extend((0..n).map(|t| {
                    let k = &c.k[l][t * d + h * dh..t * d + (h + 1) * dh];
                    q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale
                }));
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = zero;
                scores.iter_mut().for_each(|s| {
                    *s = (*s - max).exp();
                    sum += *s;
                });
                let out = &mut att[i * d + h * dh..i * d + (h + 1) * dh];
                for (t, &p) in scores.iter().enumerate() {
                    let w = p / sum;
                    let vv = &c.v[l][t * d + h * dh..t * d + (h + 1) * dh];
                    out.iter_mut().zip(vv).for_each(|(o, &val)| *o += w * val);
                }
            }
        }
        let mut o = vec![zero; b * d];
        gemm(one, Mat::new(&att, b, d), Mat::new(params.slice(&ll.w_o), d, d), zero, MatMut::new(&mut o, b, d));
        add_bias(&mut o, params.slice(&ll.b_o));
        x.iter_mut().zip(&o).for_each(|(a, &r)| *a += r);

        let (_, _, h2) = layer_norm(&x, b, d, params.slice(&ll.ln2_g), params.slice(&ll.ln2_b));
        let mut u = vec![zero; b * f];
        gemm(one, Mat::new(&h2, b, d), Mat::new(params.slice(&ll.w_ff1), d, f), zero, MatMut::new(&mut u, b, f));
        add_bias(&mut u, params.slice(&ll.b_ff1));
        u.iter_mut().for_each(|z| *z = gelu(*z));
        let mut ff = vec![zero; b * d];
        gemm(one, Mat::new(&u, b, f), Mat::new(params.slice(&ll.w_ff2), f, d), zero, MatMut::new(&mut ff, b, d));
        add_bias(&mut ff, params.slice(&ll.b_ff2));
        x.iter_mut().zip(&ff).for_each(|(a, &r)| *a += r);
    }
    caches.iter_mut().for_each(|c| c.len += 1);

    let (_, _, hf) = layer_norm(&x, b, d, params.slice(&lay.lnf_g), params.slice(&lay.lnf_b));
    let mut logits = vec![zero; b * v];
    gemm(one, Mat::new(&hf, b, d), Mat::new(params.slice(&lay.w_out), d, v), zero, MatMut::new(&mut logits, b, v));
    add_bias(&mut logits, params.slice(&lay.b_out));
    logits.chunks_exact_mut(v).for_each(log_softmax_row);
    logits
}

fn choose<T: Scalar>(row: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature < 1e-6 {
        let mut best = 0;
        for (i, &lp) in row.iter().enumerate() {
            if lp > row[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let scaled: Vec<f64> = row.iter().map(|lp| lp.f64() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    // rounding left u just above the last bucket
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as u32
}

/// Decodes every prompt to EOS, `max_new` tokens, or the context limit.
/// `seeds[i]` drives sequence `i` only, so results do not depend on batching.
pub fn generate<T: Scalar>(
    params: &Params<T>,
    prompts: &[Vec<u32>],
    opts: DecodeOptions,
    seeds: &[u64],
) -> Result<Vec<Generation>, ModelError> {
    assert_eq!(prompts.len(), seeds.len(), "one seed per prompt");
    let max_ctx = params.cfg.max_context;
    let mut caches = Vec::with_capacity(prompts.len());
    let mut rows = Vec::with_capacity(prompts.len());
    for p in prompts {
        check_tokens(params, p)?;
        let (c, r) = prefill(params, p)?;
        caches.push(c);
        rows.push(r);
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut out: Vec<Generation> = prompts
        .iter()
        .map(|_| Generation { tokens: Vec::new(), logprobs: Vec::new(), eos_logprob: None, overflow: false })
        .collect();
    let mut active: Vec<usize> = (0..prompts.len()).collect();

    while !active.is_empty() {
        let mut feed = Vec::with_capacity(active.len());
        for &i in &active {
            let g = &mut out[i];
            if g.tokens.len() >= opts.max_new {
                continue;
            }
            let tok = choose(&rows[i], opts.temperature, &mut rngs[i]);
            let lp = rows[i][tok as usize].f64();
            if tok == EOS {
                g.eos_logprob = Some(lp);
                continue;
            }
            g.tokens.push(tok);
            g.logprobs.push(lp);
            if g.tokens.len() >= opts.max_new {
                continue;
            }
            if caches[i].len >= max_ctx {
                g.overflow = true;
                continue;
            }
            feed.push((i, tok));
        }
        if feed.is_empty() {
            break;
        }
        let tokens: Vec<u32> = feed.iter().map(|&(_, t)| t).collect();
        let idx: Vec<usize> = feed.iter().map(|&(i, _)| i).collect();
        let mut batch: Vec<&mut KvCache<T>> =
            caches.iter_mut().enumerate().filter(|(i, _)| idx.binary_search(i).is_ok()).map(|(_, c)| c).collect();
        let lps = step_batch(params, &mut batch, &tokens);
        let v = params.cfg.vocab_size;
        for (k, &i) in idx.iter().enumerate() {
            rows[i] = lps[k * v..(k + 1) * v].to_vec();
        }
        active = idx;
    }
    Ok(out)
}

pub fn sample<T: Scalar>(
    params: &Params<T>,
    prompt: &[u32],
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> Result<Generation, ModelError> {
    let mut g = generate(params, &[prompt.to_vec()], DecodeOptions { temperature, max_new }, &[seed])?;
    Ok(g.remove(0))
}

#[cfg(test)]
mod tests {
    use super::super::params::{init_params, ModelConfig, Precision};
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_context: 12,
            precision: Precision::TestF64,
        }
    }

    fn params() -> Params<f64> {
        let mut p = init_params::<f64>(&cfg(), 9).unwrap();
        p.data.iter_mut().enumerate().for_each(|(i, v)| *v += ((i * 7919) % 13) as f64 * 0.03 - 0.18);
        p
    }

    #[test]
    fn cached_step_matches_full_forward() {
        let p = params();
        let prompt = vec![0u32, 4, 5];
        let g = sample(&p, &prompt, 1.0, 6, 3).unwrap();
        let mut full = prompt.clone();
        full.extend(&g.tokens);
        let tr = forward(&p, &full).unwrap();
        for (i, &lp) in g.logprobs.iter().enumerate() {
            let j = prompt.len() + i;
            assert!((tr.token_logprob(j) - lp).abs() < 1e-10);
        }
    }

    #[test]
    fn batching_does_not_change_samples() {
        let p = params();
        let prompts = vec![vec![0u32, 4], vec![0u32, 6, 7, 2], vec![0u32]];
        let opts = DecodeOptions { temperature: 0.8, max_new: 5 };
        let batch = generate(&p, &prompts, opts, &[1, 2, 3]).unwrap();
        for (i, pr) in prompts.iter().enumerate() {
            let one = sample(&p, pr, 0.8, 5, [1, 2, 3][i]).unwrap();
            assert_eq!(one, batch[i]);
        }
    }

    #[test]
    fn respects_context_limit() {
        let p = params();
        let g = generate(&p, &[vec![2u32; 10]], DecodeOptions { temperature: 1.0, max_new: 50 }, &[5]).unwrap();
        let g = &g[0];
        assert!(g.hit_eos() || g.overflow);
        assert!(g.tokens.len() <= 3);
        assert!(matches!(
            generate(&p, &[vec![2u32; 13]], DecodeOptions::greedy(1), &[0]),
            Err(ModelError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn greedy_is_argmax() {
        let p = params();
        let g = sample(&p, &[0, 3], 0.0, 1, 0).unwrap();
        let tr = forward(&p, &[0, 3]).unwrap();
        let row = tr.row(1);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        if best as u32 == EOS {
            assert!(g.hit_eos());
        } else {
            assert_eq!(g.tokens, vec![best as u32]);
        }
    }
}
