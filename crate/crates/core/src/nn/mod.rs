//! Minimal neural-network substrate for the mutation controller: dense
//! tensors, an LSTM with hand-written BPTT, dense heads, Adam, and a
//! finite-difference gradient checker.

mod adam;
pub mod gradcheck;
mod lstm;
mod ops;
mod params;
mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradcheck, GradReport};
pub use lstm::{
    bidir_backward, bidir_encode, lstm_backward, lstm_forward, lstm_step, BidirInputGrads, BidirTape, LstmInputGrads,
    LstmParams, LstmTape,
};
pub use ops::{
    embed, embed_backward, linear, linear_backward, shape_logits, softmax, softmax_sample, Categorical, LogitShaping,
};
pub use params::{load_checkpoint, save_checkpoint, Parameters, CHECKPOINT_VERSION};
pub use tensor::{axpy, dot, Tensor2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for {len} rows")]
    OutOfRange { index: usize, len: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
