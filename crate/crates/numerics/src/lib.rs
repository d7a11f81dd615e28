//! Dense `f64` tensors, a reverse-mode differentiation tape, and the
//! optimizers used to train graph encoders, policy networks and small CNNs.

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Bindings, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
