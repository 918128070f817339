use serde::{Deserialize, Serialize};

use super::linalg::Scalar;
use super::params::Params;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(n: usize) -> Self {
        OptimizerState { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam { cfg, state: OptimizerState::new(n_params) }
    }

    /// One clipped Adam update. A non-finite gradient is rejected before any
    /// state changes. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) -> Result<f64, ModelError> {
        self.step_with_lr(params, grads, self.cfg.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) -> Result<f64, ModelError> {
        if grads.data.len() != params.data.len() || self.state.m.len() != params.data.len() {
            return Err(ModelError::ShapeMismatch { expected: params.data.len(), got: grads.data.len() });
        }
        if !grads.all_finite() {
            return Err(ModelError::NonFiniteGradient);
        }
        let norm = grads.l2_norm();
        if !norm.is_finite() {
            return Err(ModelError::NonFiniteGradient);
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (tb1, tb2, tclip) = (T::lit(b1), T::lit(b2), T::lit(clip));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.cfg.eps);
        let st = &mut self.state;
        for i in 0..params.data.len() {
            let g = grads.data[i] * tclip;
            st.m[i] = tb1 * st.m[i] + (T::one() - tb1) * g;
            st.v[i] = tb2 * st.v[i] + (T::one() - tb2) * g * g;
            params.data[i] -= step * st.m[i] / ((st.v[i] * inv_bc2).sqrt() + eps);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::super::params::{ModelConfig, Precision};
    use super::*;

    fn tiny() -> Params<f64> {
        Params::zeros(ModelConfig {
            vocab_size: 3,
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_ff: 2,
            max_context: 2,
            precision: Precision::TestF64,
        })
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.data[0] = 0.3;
        g.data[1] = -0.2;
        let mut opt = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, p.len());
        opt.step(&mut p, &g).unwrap();
        assert!((p.data[0] + 0.01).abs() < 1e-6);
        assert!((p.data[1] - 0.01).abs() < 1e-6);
        assert_eq!(p.data[2], 0.0);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.data[0] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::default(), p.len());
        let before = p.clone();
        assert!(matches!(opt.step(&mut p, &g), Err(ModelError::NonFiniteGradient)));
        assert_eq!(p, before);
        assert_eq!(opt.state.step, 0);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.data[0] = 3.0;
        g.data[1] = 4.0;
        let mut opt = Adam::new(AdamConfig::default(), p.len());
        assert!((opt.step(&mut p, &g).unwrap() - 5.0).abs() < 1e-12);
        // m after one step holds (1 - beta1) * clipped gradient
        assert!((opt.state.m[0] - 0.1 * 0.6).abs() < 1e-12);
    }
}
