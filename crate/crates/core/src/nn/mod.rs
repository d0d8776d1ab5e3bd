//! A small neural-network kernel: dense, LSTM and GRU layers over batched
//! sequences, hand-written reverse-mode gradients, Adam, and bit-exact
//! text checkpoints. All arithmetic is `f64`.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod network;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use network::{clip_grad_norm, grad_norm, row, Activation, LayerSpec, Network, RecurrentState, SeqBatch};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Dense layer shorthand.
pub fn dense(input: usize, output: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense { input, output, activation }
}
