use std::path::PathBuf;

use thiserror::Error;

use crate::grid::Dims;
use crate::optim::OptimizationTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: Dims,
        right: Dims,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("volume {dims} too small: {reason}")]
    VolumeTooSmall { dims: Dims, reason: String },

    #[error("structure {id} is empty")]
    EmptyStructure { id: u32 },

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: &'static str },

    #[error("optimization diverged at level {level}, iteration {iteration}")]
    Diverged {
        level: usize,
        iteration: usize,
        trace: Box<OptimizationTrace>,
    },

    #[error("deformation folds: max |dW/dx| = {max_jacobian:.4} must stay below 1")]
    Folding { max_jacobian: f64 },

    #[error("slice index {index} out of range for {plane} plane with {len} slices")]
    SliceOutOfRange {
        plane: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{path}: bad magic, expected {expected}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: unsupported datatype {datatype}")]
    UnsupportedDatatype { path: PathBuf, datatype: String },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: expected {expected} components per voxel, found {found}")]
    ComponentMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: invalid configuration: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
