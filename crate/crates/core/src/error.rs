use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unencodable value {value} for {dtype}")]
    Unencodable { value: f64, dtype: &'static str },

    #[error("width mismatch: expected {expected} bits, got {actual}")]
    WidthMismatch { expected: u32, actual: u32 },

    #[error("invalid bit width {0}")]
    InvalidWidth(u32),

    #[error("bit-error rate {0} outside [0, 1]")]
    InvalidBer(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scaled weight {value} at index {index} violates exponent-MSB assumption")]
    ExponentMsbViolation { index: usize, value: f64 },

    #[error("enumeration infeasible for {0}")]
    EnumerationInfeasible(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("not positively homogeneous: layer {0} uses a non-ReLU hidden activation")]
    NotPositivelyHomogeneous(usize),

    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("checksum failure for {0}")]
    ChecksumFailure(PathBuf),

    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Unencodable { .. } => "unencodable_value",
            Error::WidthMismatch { .. } => "width_mismatch",
            Error::InvalidWidth(_) => "invalid_width",
            Error::InvalidBer(_) => "invalid_ber",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ExponentMsbViolation { .. } => "exponent_msb_violation",
            Error::EnumerationInfeasible(_) => "enumeration_infeasible",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NotPositivelyHomogeneous(_) => "not_positively_homogeneous",
            Error::MalformedManifest { .. } => "malformed_manifest",
            Error::ChecksumFailure(_) => "checksum_failure",
            Error::UnknownDtype(_) => "unknown_dtype",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
