use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a proper rotation (orthonormality/determinant deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },

    #[error("plane directions are not orthonormal (deviation {deviation:.3e})")]
    InvalidPlane { deviation: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("position {value:.3} mm on axis {axis} lies outside the half extent {half_extent:.3} mm")]
    OutOfExtent { axis: usize, value: f64, half_extent: f64 },

    #[error("zero-length vector in {0}")]
    ZeroVector(&'static str),

    #[error("degenerate 6D rotation output: raw columns are zero or parallel")]
    DegenerateSixD,

    #[error("zero quaternion cannot be normalized")]
    ZeroQuaternion,

    #[error("raw encoding of kind {kind} needs {expected} values, got {got}")]
    EncodingLength { kind: &'static str, expected: usize, got: usize },

    #[error("transform is singular (determinant {0:.3e})")]
    SingularTransform(f64),

    #[error("transform is not rigid + isotropic scale + mirror: {0}")]
    NonConformingTransform(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown body region id {0}")]
    UnknownRegion(usize),

    #[error("unknown {what} '{value}'")]
    UnknownName { what: &'static str, value: String },

    #[error("region mismatch: prediction is {pred}, ground truth is {truth}")]
    RegionMismatch { pred: String, truth: String },

    #[error("empty {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what} file {path}: {reason}")]
    Format { what: &'static str, path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    VariantMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 1 = usage/configuration, 2 = data, 3 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownName { .. } | Error::VariantMismatch(_) => 1,
            Error::Numerical(_) | Error::DegenerateSixD | Error::ZeroQuaternion | Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
