//! Minimal deterministic reverse-mode autodiff with the layers TG-Critic needs,
//! Adam, finite-difference gradient checking and a checkpoint container.

mod adam;
mod checkpoint;
mod gradcheck;
mod init;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, FORMAT_VERSION};
pub use gradcheck::{grad_check, Coords, GradCheckReport};
pub use init::{he_uniform, xavier_uniform};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Axis, Gradients, Tape, Var, CE_FLOOR};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any trainable parameter")]
    Detached,
    #[error("non-finite gradient in {name} at index {index} ({value})")]
    NonFiniteGradient {
        name: String,
        index: usize,
        value: f64,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
