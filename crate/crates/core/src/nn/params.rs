use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::Scalar;
use super::ModelError;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "TEST_F64")]
    TestF64,
    #[serde(rename = "TRAIN_F32")]
    TrainF32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 95,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_context: 512,
            precision: Precision::TrainF32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive");
        }
        if self.n_layers == 0 || self.max_context == 0 {
            return bad("need at least one layer and a positive context");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Initialization rule for a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Gain,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_ff1: Range<usize>,
    pub b_ff1: Range<usize>,
    pub w_ff2: Range<usize>,
    pub b_ff2: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector, in declaration
/// order (this is also the checkpoint order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub tensors: Vec<(String, Range<usize>, TensorKind)>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut tensors = Vec::new();
        let mut next = 0usize;
        let mut take = |name: String, n: usize, kind: TensorKind| {
            let r = next..next + n;
            next += n;
            tensors.push((name, r.clone(), kind));
            r
        };
        let tok_emb = take("tok_emb".into(), v * d, TensorKind::Weight);
        let pos_emb = take("pos_emb".into(), cfg.max_context * d, TensorKind::Weight);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut t = |s: &str, n, k| take(format!("layer{l}.{s}"), n, k);
            layers.push(LayerLayout {
                ln1_g: t("ln1_g", d, TensorKind::Gain),
                ln1_b: t("ln1_b", d, TensorKind::Bias),
                w_qkv: t("w_qkv", d * 3 * d, TensorKind::Weight),
                b_qkv: t("b_qkv", 3 * d, TensorKind::Bias),
                w_o: t("w_o", d * d, TensorKind::Weight),
                b_o: t("b_o", d, TensorKind::Bias),
                ln2_g: t("ln2_g", d, TensorKind::Gain),
                ln2_b: t("ln2_b", d, TensorKind::Bias),
                w_ff1: t("w_ff1", d * f, TensorKind::Weight),
                b_ff1: t("b_ff1", f, TensorKind::Bias),
                w_ff2: t("w_ff2", f * d, TensorKind::Weight),
                b_ff2: t("b_ff2", d, TensorKind::Bias),
            });
        }
        let lnf_g = take("lnf_g".into(), d, TensorKind::Gain);
        let lnf_b = take("lnf_b".into(), d, TensorKind::Bias);
        let w_out = take("w_out".into(), d * v, TensorKind::Weight);
        let b_out = take("b_out".into(), v, TensorKind::Bias);
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out, b_out, tensors, total: next }
    }
}

/// The full parameter set as one flat vector. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: ModelConfig) -> Self {
        let layout = Layout::new(&cfg);
        let data = vec![T::zero(); layout.total];
        Params { cfg, layout, data }
    }

    pub fn zeros_like(&self) -> Self {
        Params { cfg: self.cfg, layout: self.layout.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, r: &Range<usize>) -> &[T] {
        &self.data[r.clone()]
    }

    pub fn slice_mut(&mut self, r: &Range<usize>) -> &mut [T] {
        &mut self.data[r.clone()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { cfg: self.cfg, layout: self.layout.clone(), data: self.data.iter().map(|v| U::lit(v.f64())).collect() }
    }
}

/// Normal(0, 0.02) weights, unit gains, zero biases; deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Params<T>, ModelError> {
    cfg.validate()?;
    let mut p = Params::<T>::zeros(*cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = p.layout.tensors.clone();
    for (_, range, kind) in &tensors {
        let dst = p.slice_mut(range);
        match kind {
            TensorKind::Weight => dst.iter_mut().for_each(|v| *v = T::lit(normal.sample(&mut rng))),
            TensorKind::Gain => dst.iter_mut().for_each(|v| *v = T::one()),
            TensorKind::Bias => {}
        }
    }
    Ok(p)
}
