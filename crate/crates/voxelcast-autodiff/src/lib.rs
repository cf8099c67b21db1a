//! Reverse-mode automatic differentiation over dense tensors, with exactly
//! the operation set the neural renderer needs: 2D/3D convolution, dense
//! layers, batch normalization, nearest upsampling, pooling, concatenation,
//! tiling, the depth-to-channel projection reshape, and L1/L2 losses.

pub mod conv;
pub mod gradcheck;
pub mod scalar;
pub mod store;
pub mod tape;

pub use scalar::Scalar;
pub use store::ParameterStore;
pub use tape::{BatchStats, Tape, Var};

/// Errors surfaced by tensor operations and checkpoint IO.
#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter '{0}'")]
    MissingParameter(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for AutodiffError {
    fn from(e: std::io::Error) -> Self {
        AutodiffError::Io(e.to_string())
    }
}
