use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the denoising pipeline.
#[derive(Debug, Error)]
pub enum GidError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("provenance error: expected {expected}, found {found}")]
    Provenance { expected: String, found: String },

    #[error("calibration rejected: spread {spread_deg:.2} deg on sensor {sensor} exceeds {limit_deg} deg")]
    CalibrationMotion {
        sensor: usize,
        spread_deg: f64,
        limit_deg: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value at epoch {epoch}, batch {batch}, worst gradient in {section}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        section: String,
    },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GidError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GidError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        GidError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag used by the CLI's single-line failure output.
    pub fn kind(&self) -> &'static str {
        match self {
            GidError::InvalidInput(_) => "invalid-input",
            GidError::Config(_) => "config",
            GidError::Shape { .. } => "shape",
            GidError::Provenance { .. } => "provenance",
            GidError::CalibrationMotion { .. } => "calibration-motion",
            GidError::InsufficientData(_) => "insufficient-data",
            GidError::NonFinite { .. } => "non-finite",
            GidError::NonFiniteGradient(_) => "non-finite-gradient",
            GidError::Parse { .. } => "parse",
            GidError::GradCheck(_) => "grad-check",
            GidError::Checkpoint(_) => "checkpoint",
            GidError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, GidError>;
