//! Pre-norm causal transformer: forward pass with cached activations and the
//! matching hand-derived backward pass.

use std::ops::Range;

use super::linalg::{add_bias, add_col_sums, gemm, log_softmax_row, Mat, MatMut, Scalar};
use super::params::Params;
use super::ModelError;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    u: Vec<T>,
    th: Vec<T>,
    a: Vec<T>,
}

/// Next-token log-probabilities for every input position plus the
/// activations needed by [`backward`]. Row `t` predicts token `t + 1`.
pub struct ForwardTrace<T> {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<T>,
    vocab: usize,
    layers: Vec<LayerCache<T>>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    hf: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.logprobs[t * self.vocab..(t + 1) * self.vocab]
    }

    /// log P(tokens[j] | tokens[..j]) for `j >= 1`.
    pub fn token_logprob(&self, j: usize) -> T {
        self.row(j - 1)[self.tokens[j] as usize]
    }

    pub fn span_logprobs(&self, span: Range<usize>) -> Vec<T> {
        span.map(|j| self.token_logprob(j)).collect()
    }

    /// Key and value rows of layer `l`, used to seed an inference cache.
    pub(crate) fn layer_kv(&self, l: usize, d: usize) -> (Vec<T>, Vec<T>) {
        let qkv = &self.layers[l].qkv;
        let n = self.len();
        let mut k = Vec::with_capacity(n * d);
        let mut v = Vec::with_capacity(n * d);
        for t in 0..n {
            let row = &qkv[t * 3 * d..(t + 1) * 3 * d];
            k.extend_from_slice(&row[d..2 * d]);
            v.extend_from_slice(&row[2 * d..]);
        }
        (k, v)
    }
}

/// One term of a loss of the form `-sum coeff * log P(token | row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target<T> {
    pub row: usize,
    pub token: u32,
    pub coeff: T,
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], n: usize, d: usize, g: &[T], b: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let mut y = vec![T::zero(); n * d];
    let inv_d = T::lit(1.0 / d as f64);
    let eps = T::lit(LN_EPS);
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd[t] = r;
        for i in 0..d {
            let xh = (row[i] - mean) * r;
            xhat[t * d + i] = xh;
            y[t * d + i] = xh * g[i] + b[i];
        }
    }
    (xhat, rstd, y)
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    n: usize,
    d: usize,
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * d];
    let inv_d = T::lit(1.0 / d as f64);
    for t in 0..n {
        let dyr = &dy[t * d..(t + 1) * d];
        let xr = &xhat[t * d..(t + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xr[i];
            db[i] += dyr[i];
            let dxh = dyr[i] * g[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xr[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dx[t * d + i] = rstd[t] * (dxh - mean_dxhat - xr[i] * mean_dxhat_xhat);
        }
    }
    dx
}

/// The tanh inside the GELU approximation.
pub(crate) fn gelu_tanh<T: Scalar>(u: T) -> T {
    (T::lit(GELU_C) * (u + T::lit(GELU_A) * u * u * u)).tanh_fast()
}

pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    T::lit(0.5) * u * (T::one() + gelu_tanh(u))
}

fn gelu_grad<T: Scalar>(u: T, th: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * (T::one() + th) + half * u * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * u * u)
}

/// Row-wise softmax restricted to `j <= i`; entries above the diagonal are zeroed.
fn causal_softmax<T: Scalar>(p: &mut [T], n: usize) {
    for i in 0..n {
        let row = &mut p[i * n..(i + 1) * n];
        let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row[..=i].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        row[..=i].iter_mut().for_each(|v| *v *= inv);
        row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
    }
}

pub(crate) fn check_tokens<T: Scalar>(params: &Params<T>, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() > params.cfg.max_context {
        return Err(ModelError::ContextOverflow { len: tokens.len(), max: params.cfg.max_context });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= params.cfg.vocab_size) {
        return Err(ModelError::BadToken(bad));
    }
    Ok(())
}

pub fn forward<T: Scalar>(params: &Params<T>, tokens: &[u32]) -> Result<ForwardTrace<T>, ModelError> {
    check_tokens(params, tokens)?;
    let cfg = &params.cfg;
    let lay = &params.layout;
    let n = tokens.len();
    let (d, nh, dh, f, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
    let (zero, one) = (T::zero(), T::one());

    let mut x = vec![zero; n * d];
    let te = params.slice(&lay.tok_emb);
    let pe = params.slice(&lay.pos_emb);
    for (t, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        for i in 0..d {
            x[t * d + i] = te[tok * d + i] + pe[t * d + i];
        }
    }

    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut layers = Vec::with_capacity(lay.layers.len());
    for ll in &lay.layers {
        let (xhat1, rstd1, h1) = layer_norm(&x, n, d, params.slice(&ll.ln1_g), params.slice(&ll.ln1_b));
        let mut qkv = vec![zero; n * 3 * d];
        gemm(
            one,
            Mat::new(&h1, n, d),
            Mat::new(params.slice(&ll.w_qkv), d, 3 * d),
            zero,
            MatMut::new(&mut qkv, n, 3 * d),
        );
        add_bias(&mut qkv, params.slice(&ll.b_qkv));

        let mut probs = vec![zero; nh * n * n];
        let mut att = vec![zero; n * d];
        for h in 0..nh {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            let q = Mat::strided(&qkv, h * dh, n, dh, 3 * d, 1);
            let k = Mat::strided(&qkv, d + h * dh, n, dh, 3 * d, 1);
            gemm(scale, q, k.t(), zero, MatMut::new(p, n, n));
            causal_softmax(p, n);
            let vh = Mat::strided(&qkv, 2 * d + h * dh, n, dh, 3 * d, 1);
            gemm(one, Mat::new(p, n, n), vh, zero, MatMut::strided(&mut att, h * dh, n, dh, d, 1));
        }

        let mut o = vec![zero; n * d];
        gemm(one, Mat::new(&att, n, d), Mat::new(params.slice(&ll.w_o), d, d), zero, MatMut::new(&mut o, n, d));
        add_bias(&mut o, params.slice(&ll.b_o));
        x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);

        let (xhat2, rstd2, h2) = layer_norm(&x, n, d, params.slice(&ll.ln2_g), params.slice(&ll.ln2_b));
        let mut u = vec![zero; n * f];
        gemm(one, Mat::new(&h2, n, d), Mat::new(params.slice(&ll.w_ff1), d, f), zero, MatMut::new(&mut u, n, f));
        add_bias(&mut u, params.slice(&ll.b_ff1));
        let th: Vec<T> = u.iter().map(|&z| gelu_tanh(z)).collect();
        let half = T::lit(0.5);
        let a: Vec<T> = u.iter().zip(&th).map(|(&z, &t)| half * z * (one + t)).collect();
        let mut ff = vec![zero; n * d];
        gemm(one, Mat::new(&a, n, f), Mat::new(params.slice(&ll.w_ff2), f, d), zero, MatMut::new(&mut ff, n, d));
        add_bias(&mut ff, params.slice(&ll.b_ff2));
        x.iter_mut().zip(&ff).for_each(|(a, &b)| *a += b);

        layers.push(LayerCache { xhat1, rstd1, h1, qkv, probs, att, xhat2, rstd2, h2, u, th, a });
    }

    let (xhatf, rstdf, hf) = layer_norm(&x, n, d, params.slice(&lay.lnf_g), params.slice(&lay.lnf_b));
    let mut logprobs = vec![zero; n * v];
    gemm(one, Mat::new(&hf, n, d), Mat::new(params.slice(&lay.w_out), d, v), zero, MatMut::new(&mut logprobs, n, v));
    add_bias(&mut logprobs, params.slice(&lay.b_out));
    logprobs.chunks_exact_mut(v).for_each(log_softmax_row);

    Ok(ForwardTrace { tokens: tokens.to_vec(), logprobs, vocab: v, layers, xhatf, rstdf, hf })
}

/// Gradient of `-sum coeff * logprob` with respect to the logits.
pub fn dlogits_for_targets<T: Scalar>(trace: &ForwardTrace<T>, targets: &[Target<T>]) -> Vec<T> {
    let v = trace.vocab;
    let mut dl = vec![T::zero(); trace.len() * v];
    for tg in targets {
        let row = trace.row(tg.row);
        let out = &mut dl[tg.row * v..(tg.row + 1) * v];
        for (o, &lp) in out.iter_mut().zip(row) {
            *o += tg.coeff * lp.exp();
        }
        out[tg.token as usize] -= tg.coeff;
    }
    dl
}

/// Accumulates `d loss / d params` into `grads` for
/// `loss = -sum coeff * logprob(target)` and returns that loss.
pub fn backward_targets<T: Scalar>(
    params: &Params<T>,
    trace: &ForwardTrace<T>,
    targets: &[Target<T>],
    grads: &mut Params<T>,
) -> T {
    let loss = targets.iter().map(|tg| -tg.coeff * trace.row(tg.row)[tg.token as usize]).sum::<T>();
    let dl = dlogits_for_targets(trace, targets);
    backward(params, trace, &dl, grads);
    loss
}

/// Backpropagates logit gradients through the whole network, accumulating
/// into `grads`.
pub fn backward<T: Scalar>(params: &Params<T>, trace: &ForwardTrace<T>, dlogits: &[T], grads: &mut Params<T>) {
    let cfg = &params.cfg;
    let lay = &params.layout;
    let n = trace.len();
    let (d, nh, dh, f, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
    let (zero, one) = (T::zero(), T::one());
    assert_eq!(dlogits.len(), n * v);

    // output head
    add_col_sums(grads.slice_mut(&lay.b_out), dlogits, n, v);
    gemm(
        one,
        Mat::new(&trace.hf, n, d).t(),
        Mat::new(dlogits, n, v),
        one,
        MatMut::new(grads.slice_mut(&lay.w_out), d, v),
    );
    let mut dhf = vec![zero; n * d];
    gemm(one, Mat::new(dlogits, n, v), Mat::new(params.slice(&lay.w_out), d, v).t(), zero, MatMut::new(&mut dhf, n, d));
    let mut dx = {
        let (dg, db) = split_two(grads, &lay.lnf_g, &lay.lnf_b);
        layer_norm_backward(&dhf, &trace.xhatf, &trace.rstdf, params.slice(&lay.lnf_g), n, d, dg, db)
    };

    let scale = T::lit(1.0 / (dh as f64).sqrt());
    for (ll, c) in lay.layers.iter().zip(&trace.layers).rev() {
        // feed-forward block
        add_col_sums(grads.slice_mut(&ll.b_ff2), &dx, n, d);
        gemm(one, Mat::new(&c.a, n, f).t(), Mat::new(&dx, n, d), one, MatMut::new(grads.slice_mut(&ll.w_ff2), f, d));
        let mut du = vec![zero; n * f];
        gemm(one, Mat::new(&dx, n, d), Mat::new(params.slice(&ll.w_ff2), f, d).t(), zero, MatMut::new(&mut du, n, f));
        du.iter_mut().zip(c.u.iter().zip(&c.th)).for_each(|(g, (&z, &t))| *g *= gelu_grad(z, t));
        add_col_sums(grads.slice_mut(&ll.b_ff1), &du, n, f);
        gemm(one, Mat::new(&c.h2, n, d).t(), Mat::new(&du, n, f), one, MatMut::new(grads.slice_mut(&ll.w_ff1), d, f));
        let mut dh2 = vec![zero; n * d];
        gemm(one, Mat::new(&du, n, f), Mat::new(params.slice(&ll.w_ff1), d, f).t(), zero, MatMut::new(&mut dh2, n, d));
        let dx_ln2 = {
            let (dg, db) = split_two(grads, &ll.ln2_g, &ll.ln2_b);
            layer_norm_backward(&dh2, &c.xhat2, &c.rstd2, params.slice(&ll.ln2_g), n, d, dg, db)
        };
        dx.iter_mut().zip(&dx_ln2).for_each(|(a, &b)| *a += b);

        // attention block
        add_col_sums(grads.slice_mut(&ll.b_o), &dx, n, d);
        gemm(one, Mat::new(&c.att, n, d).t(), Mat::new(&dx, n, d), one, MatMut::new(grads.slice_mut(&ll.w_o), d, d));
        let mut datt = vec![zero; n * d];
        gemm(one, Mat::new(&dx, n, d), Mat::new(params.slice(&ll.w_o), d, d).t(), zero, MatMut::new(&mut datt, n, d));

        let mut dqkv = vec![zero; n * 3 * d];
        let mut dp = vec![zero; n * n];
        for h in 0..nh {
            let p = &c.probs[h * n * n..(h + 1) * n * n];
            let d_out = Mat::strided(&datt, h * dh, n, dh, d, 1);
            let vh = Mat::strided(&c.qkv, 2 * d + h * dh, n, dh, 3 * d, 1);
            gemm(one, d_out, vh.t(), zero, MatMut::new(&mut dp, n, n));
            gemm(one, Mat::new(p, n, n).t(), d_out, zero, MatMut::strided(&mut dqkv, 2 * d + h * dh, n, dh, 3 * d, 1));
            // softmax backward, in place over dp
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
                dr[i + 1..].iter_mut().for_each(|x| *x = zero);
            }
            let q = Mat::strided(&c.qkv, h * dh, n, dh, 3 * d, 1);
            let k = Mat::strided(&c.qkv, d + h * dh, n, dh, 3 * d, 1);
            gemm(scale, Mat::new(&dp, n, n), k, zero, MatMut::strided(&mut dqkv, h * dh, n, dh, 3 * d, 1));
            gemm(scale, Mat::new(&dp, n, n).t(), q, zero, MatMut::strided(&mut dqkv, d + h * dh, n, dh, 3 * d, 1));
        }
        add_col_sums(grads.slice_mut(&ll.b_qkv), &dqkv, n, 3 * d);
        gemm(
            one,
            Mat::new(&c.h1, n, d).t(),
            Mat::new(&dqkv, n, 3 * d),
            one,
            MatMut::new(grads.slice_mut(&ll.w_qkv), d, 3 * d),
        );
        let mut dh1 = vec![zero; n * d];
        gemm(
            one,
            Mat::new(&dqkv, n, 3 * d),
            Mat::new(params.slice(&ll.w_qkv), d, 3 * d).t(),
            zero,
            MatMut::new(&mut dh1, n, d),
        );
        let dx_ln1 = {
            let (dg, db) = split_two(grads, &ll.ln1_g, &ll.ln1_b);
            layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, params.slice(&ll.ln1_g), n, d, dg, db)
        };
        dx.iter_mut().zip(&dx_ln1).for_each(|(a, &b)| *a += b);
    }

    // embeddings
    let tok_off = lay.tok_emb.start;
    let pos_off = lay.pos_emb.start;
    for (t, &tok) in trace.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        for i in 0..d {
            grads.data[tok_off + tok as usize * d + i] += row[i];
            grads.data[pos_off + t * d + i] += row[i];
        }
    }
}

/// Two disjoint mutable tensor slices (`a` must precede `b`).
fn split_two<'a, T>(p: &'a mut Params<T>, a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = p.data.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

fn check_weights<T: Scalar>(input_len: usize, span: &Range<usize>, weights: &[T]) -> Result<T, ModelError> {
    if span.start == 0 || span.end > input_len || span.start >= span.end {
        return Err(ModelError::BadSpan { start: span.start, end: span.end, len: input_len });
    }
    if weights.len() != span.len() {
        return Err(ModelError::WeightLength { weights: weights.len(), span: span.len() });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(ModelError::BadWeights("weights must be finite and non-negative"));
    }
    let total: T = weights.iter().copied().sum();
    if total <= T::zero() {
        return Err(ModelError::BadWeights("all weights are zero"));
    }
    Ok(total)
}

/// Accumulates `scale * grad` of the normalized weighted cross-entropy over
/// `span` into `grads` and returns the (unscaled) loss.
pub fn weighted_ce_accumulate<T: Scalar>(
    params: &Params<T>,
    input: &[u32],
    span: Range<usize>,
    weights: &[T],
    scale: T,
    grads: &mut Params<T>,
) -> Result<T, ModelError> {
    let total = check_weights(input.len(), &span, weights)?;
    let trace = forward(params, input)?;
    let targets: Vec<Target<T>> = span
        .clone()
        .zip(weights)
        .filter(|(_, &w)| w > T::zero())
        .map(|(j, &w)| Target { row: j - 1, token: input[j], coeff: scale * w / total })
        .collect();
    backward_targets(params, &trace, &targets, grads);
    let loss = span.zip(weights).map(|(j, &w)| -w * trace.token_logprob(j)).sum::<T>() / total;
    Ok(loss)
}

/// `loss = -sum_j w_j log P(t_j | t_<j) / sum_j w_j` over `span`, with its
/// exact gradient.
pub fn weighted_ce_loss_and_grad<T: Scalar>(
    params: &Params<T>,
    input: &[u32],
    span: Range<usize>,
    weights: &[T],
) -> Result<(T, Params<T>), ModelError> {
    let mut grads = params.zeros_like();
    let loss = weighted_ce_accumulate(params, input, span, weights, T::one(), &mut grads)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::super::params::{init_params, ModelConfig, Precision};
    use super::*;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_context: 16,
            precision: Precision::TestF64,
        }
    }

    /// Larger init so that finite differences see non-trivial curvature.
    fn noisy_params(seed: u64) -> Params<f64> {
        let mut p = init_params::<f64>(&tiny_cfg(), seed).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        p
    }

    #[test]
    fn rows_are_normalized() {
        let p = init_params::<f64>(&tiny_cfg(), 1).unwrap();
        let tr = forward(&p, &[0, 3, 2, 6, 1]).unwrap();
        for t in 0..tr.len() {
            let s: f64 = tr.row(t).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let p32 = init_params::<f32>(&tiny_cfg(), 1).unwrap();
        let tr = forward(&p32, &[0, 3, 2, 6, 1]).unwrap();
        for t in 0..tr.len() {
            let s: f32 = tr.row(t).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_outputs_ignore_future_tokens() {
        let p = noisy_params(2);
        let a = forward(&p, &[0, 3, 2, 6, 1, 4]).unwrap();
        let b = forward(&p, &[0, 3, 2, 5, 5, 0]).unwrap();
        for t in 0..3 {
            for (x, y) in a.row(t).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(a.row(3).iter().zip(b.row(3)).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn overflow_and_bad_tokens_rejected() {
        let p = init_params::<f64>(&tiny_cfg(), 1).unwrap();
        assert!(matches!(forward(&p, &[0; 17]), Err(ModelError::ContextOverflow { .. })));
        assert!(matches!(forward(&p, &[9]), Err(ModelError::BadToken(9))));
        assert!(matches!(forward(&p, &[]), Err(ModelError::EmptyInput)));
    }

    #[test]
    fn single_weight_loss_is_that_nll() {
        let p = noisy_params(3);
        let input = [0u32, 4, 2, 5, 1];
        let tr = forward(&p, &input).unwrap();
        let (loss, _) = weighted_ce_loss_and_grad(&p, &input, 1..5, &[0.0, 0.0, 2.5, 0.0]).unwrap();
        assert!((loss + tr.token_logprob(3)).abs() < 1e-12);
    }

    #[test]
    fn doubling_weights_is_invariant() {
        let p = noisy_params(4);
        let input = [0u32, 4, 2, 5, 1];
        let w = [0.3, 1.0, 0.1, 0.7];
        let w2: Vec<f64> = w.iter().map(|x| x * 2.0).collect();
        let (l1, g1) = weighted_ce_loss_and_grad(&p, &input, 1..5, &w).unwrap();
        let (l2, g2) = weighted_ce_loss_and_grad(&p, &input, 1..5, &w2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_guards() {
        let p = noisy_params(5);
        let input = [0u32, 4, 2];
        assert!(matches!(weighted_ce_loss_and_grad(&p, &input, 1..3, &[0.0, 0.0]), Err(ModelError::BadWeights(_))));
        assert!(matches!(weighted_ce_loss_and_grad(&p, &input, 1..3, &[1.0]), Err(ModelError::WeightLength { .. })));
        assert!(matches!(weighted_ce_loss_and_grad(&p, &input, 0..2, &[1.0, 1.0]), Err(ModelError::BadSpan { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences_on_every_tensor() {
        let p = noisy_params(6);
        let input = [0u32, 4, 2, 5, 1, 3, 6];
        let w = [1.0, 0.1, 0.1, 1.0, 0.5, 0.2];
        let (_, g) = weighted_ce_loss_and_grad(&p, &input, 1..7, &w).unwrap();
        let loss_at = |q: &Params<f64>| weighted_ce_loss_and_grad(q, &input, 1..7, &w).unwrap().0;
        let h = 1e-5;
        for (name, range, _) in &p.layout.tensors {
            // pos_emb rows past the input never receive gradient
            let probe = if name == "pos_emb" { range.start..range.start + input.len() * 8 } else { range.clone() };
            for idx in probe.step_by(3) {
                let mut a = p.clone();
                a.data[idx] += h;
                let mut b = p.clone();
                b.data[idx] -= h;
                let fd = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
                let an = g.data[idx];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                assert!(err < 1e-5 || (fd - an).abs() < 1e-9, "{name}[{idx}] fd {fd} an {an}");
            }
        }
    }
}
