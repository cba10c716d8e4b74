// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{func} is undefined at {value}")]
    Domain { func: &'static str, value: f64 },

    #[error("label {label} is not valid here ({reason})")]
    InvalidLabel { label: usize, reason: &'static str },

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),

    #[error("missing class {0:?}")]
    MissingClass(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("dataset validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("training diverged in {phase} at step {step}: {detail}")]
    Diverged {
        phase: &'static str,
        step: usize,
        detail: String,
    },

    #[error("missing prerequisite {0}")]
    MissingPrerequisite(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
