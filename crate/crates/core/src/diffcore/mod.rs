//! Dense `f64` arrays, a dynamic reverse-mode tape, a tagged parameter
//! registry with selective freezing, SGD/Adam, finite-difference gradient
//! checking and the binary parameter container.

mod array;
pub mod container;
mod gradcheck;
mod optim;
mod registry;
mod tape;

use thiserror::Error;

pub use array::NdArray;
pub use gradcheck::grad_check;
pub use optim::{OptimizerKind, OptimizerSettings, OptimizerState};
pub use registry::{ModuleTag, ParamEntry, ParamRegistry};
pub use tape::{sigmoid, Tape, Var, LOG_CLAMP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: operand shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for {op} on a {ndim}-d array")]
    Axis { op: &'static str, axis: usize, ndim: usize },
    #[error("index {index} out of range for {op} (length {len})")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: String, index: usize },
    #[error("no optimizer moment buffer for trainable parameter {0}")]
    MissingMoment(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("unknown module tag {0:?}")]
    UnknownTag(String),
    #[error("freezing would leave no trainable parameters")]
    EmptyTrainable,
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    StepSize(f64),
    #[error("objective failed: {0}")]
    Eval(String),
}

#[cfg(test)]
mod tests;
