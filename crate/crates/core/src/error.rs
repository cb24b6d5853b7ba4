use thiserror::Error;

use crate::sampler::Stratum;

/// Errors produced by the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or unsupported file content.
    #[error("format error: {0}")]
    Format(String),

    #[error("image is {found_w}x{found_h} but intrinsics expect {expected_w}x{expected_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pixel ({m}, {n}) has no valid depth")]
    InvalidPixel { m: usize, n: usize },

    #[error("point ({0:.6}, {1:.6}, {2:.6}) lies outside the voxel grid")]
    OutOfBounds(f64, f64, f64),

    #[error("only {found} valid correspondences, at least {required} required")]
    InsufficientCorrespondences { found: usize, required: usize },

    #[error("normal equations are singular even after damping")]
    SingularSystem,

    #[error("grid has no observed voxels")]
    NoObservedVoxels,

    #[error("stratum {stratum:?} unreachable after {attempts} attempts")]
    StratumUnreachable { stratum: Stratum, attempts: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
