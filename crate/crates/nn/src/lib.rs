//! Minimal neural-network toolkit: a reverse-mode tape over 2-D tensors,
//! fully connected networks, diagonal Gaussian heads and Adam.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`).

pub mod adam;
pub mod archive;
pub mod gaussian;
pub mod gradcheck;
pub mod mlp;
mod scalar;
pub mod tape;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use gaussian::{GaussianHead, LOG_STD_MAX, LOG_STD_MIN};
pub use gradcheck::{finite_diff_check, FdReport};
pub use mlp::{Activation, BoundMlp, Mlp, MlpSpec};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};

pub use ndarray;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("input width {got} does not match layer width {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite gradient in tensor {tensor} at element {index}: {value}")]
    NonFinite { tensor: usize, index: usize, value: f64 },
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("corrupt tensor archive: {0}")]
    Decode(String),
}

/// Single-precision aliases.
pub type Mlp32 = Mlp<f32>;
pub type Mlp64 = Mlp<f64>;
