//! A small decoder-only transformer with explicit forward/backward passes,
//! batched cached decoding, Adam, and binary checkpoints.

pub mod checkpoint;
pub mod decode;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use decode::{generate, sample, DecodeOptions, Generation};
pub use linalg::Scalar;
pub use model::{
    backward, backward_targets, forward, weighted_ce_accumulate, weighted_ce_loss_and_grad, ForwardTrace, Target,
};
pub use optim::{Adam, AdamConfig, OptimizerState};
pub use params::{init_params, ModelConfig, Params, Precision};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("sequence length {len} exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    BadToken(u32),
    #[error("span {start}..{end} invalid for input of length {len}")]
    BadSpan { start: usize, end: usize, len: usize },
    #[error("{weights} weights for a span of {span} tokens")]
    WeightLength { weights: usize, span: usize },
    #[error("invalid weights: {0}")]
    BadWeights(&'static str),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("parameter shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
