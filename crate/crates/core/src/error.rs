use thiserror::Error;

use crate::controller::Singularity;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Syntax error with a human-readable location (`line:col` or `field, column`).
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("initial bound violation: rho_alpha(0) = {rho0} is not below alpha(0, x1(0)) = {alpha0}")]
    InitialBoundViolation { rho0: f64, alpha0: f64 },

    #[error("singularity at t = {t}: {kind}")]
    Singularity { t: f64, kind: Singularity },

    #[error("patch `{key}`: {message}")]
    Patch { key: String, message: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    /// True for failures caused by the input (as opposed to I/O or a mid-run abort).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Contract(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::InitialBoundViolation { .. }
                | Error::Patch { .. }
                | Error::Usage(_)
        )
    }
}
