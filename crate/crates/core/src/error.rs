use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch norm running statistics are uninitialized (eval before any train step)")]
    UninitializedStats,

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("tape records no gradients")]
    NoGradTape,

    #[error("expected a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("mask is not binary (found value {0})")]
    NonBinary(f64),

    #[error("dataset manifest: {0}")]
    Manifest(String),

    #[error("numerical abort: non-finite loss at epoch {epoch}, batch {batch} (0 = validation), lr {lr:e}")]
    Numerical { epoch: usize, batch: usize, lr: f64 },

    #[error("unsupported number of methods k={0} (embedded critical values cover 2..=10)")]
    UnsupportedK(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
