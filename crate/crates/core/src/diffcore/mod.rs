//! Dense arrays with reverse-mode differentiation.
//!
//! Every kernel used by the encoders and losses lives on [`Tape`]: a value is
//! produced by recording an operation, and [`Tape::backward`] replays the
//! record in reverse to accumulate gradients into the leaves that asked for
//! them. [`finite_difference_check`] compares those gradients against central
//! differences.

mod fd;
pub mod io;
mod kernels;
mod tape;
mod tensor;

use std::path::{Path, PathBuf};

pub use fd::finite_difference_check;
pub use tape::{Tape, Var};
pub use tensor::{DType, Float, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{kernel}: shape mismatch: {detail}")]
    Shape { kernel: &'static str, detail: String },
    #[error("{kernel}: reduction over an empty axis")]
    EmptyAxis { kernel: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DiffError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DiffError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn shape(kernel: &'static str, shapes: &[&[usize]]) -> Self {
        let detail = shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs ");
        DiffError::Shape { kernel, detail }
    }
}
