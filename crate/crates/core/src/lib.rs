pub mod align;
pub mod codec;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod report;
pub mod reward;
pub mod synth;
pub mod train;
