use thiserror::Error;

pub type Result<T, E = YieldError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum YieldError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bit grid dimensions differ: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("critical-area table does not match layout (fingerprint {expected} != {found})")]
    FingerprintMismatch { expected: String, found: String },

    #[error("simulation did not converge: CV {achieved:.4} after {samples} samples (target {target})")]
    NotConverged {
        achieved: f64,
        samples: usize,
        target: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl YieldError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Self::InvalidParameter(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Self::InfeasibleGeometry(msg.into())
    }

    /// Process exit code for command-line front ends.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::InfeasibleGeometry(_) => 3,
            Self::Config(_) | Self::InvalidParameter(_) | Self::Parse { .. } => 2,
            _ => 1,
        }
    }
}
