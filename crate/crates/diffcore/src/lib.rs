//! Minimal reverse-mode automatic differentiation over dense `f64` arrays,
//! with multilayer perceptrons, Adam, a cosine learning-rate schedule and a
//! flat binary checkpoint format.

mod array;
pub mod checkpoint;
mod mlp;
mod optim;
mod tape;

pub use array::Array;
pub use checkpoint::Checkpoint;
pub use mlp::{Activation, Dense, Mlp, MlpVars};
pub use optim::{clip_grad_norm, cosine_lr, AdamState};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape has already been replayed")]
    TapeConsumed,
    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
