//! Tensor arithmetic with reverse-mode differentiation, parameters, the Adam
//! optimizer, and deterministic random streams.

mod adam;
mod graph;
mod param;
mod rng;
mod schedule;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{sigmoid, Gradients, Graph, Segment, Var};
pub use param::{Parameter, ParamStore};
pub use rng::RngState;
pub use schedule::warmup_lr;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value during {stage}")]
    NonFinite { op: &'static str, stage: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("learning-rate schedule needs total_steps > 0")]
    EmptySchedule,
    #[error("parameter {0:?} not found")]
    MissingParam(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}

#[cfg(test)]
mod gradcheck;
