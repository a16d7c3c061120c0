use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum PsfError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The Fisher matrix is (numerically) singular. `null_direction` is the
    /// eigenvector of the smallest eigenvalue in (x, y, z) order.
    #[error("unidentifiable parameter{}: condition number {condition:.3e}, null direction {null_direction:?}", z_um.map(|z| format!(" at z = {z} um")).unwrap_or_default())]
    Unidentifiable {
        null_direction: [f64; 3],
        condition: f64,
        z_um: Option<f64>,
    },

    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl PsfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PsfError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        PsfError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = PsfError> = std::result::Result<T, E>;
