use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A value violates a documented invariant.
    #[error("invalid {what}: {reason}")]
    Validation { what: String, reason: String },

    #[error("{what} = {value} is outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate tangent (norm {norm:e})")]
    DegenerateTangent { norm: f64 },

    #[error("degenerate template {id}: {reason}")]
    DegenerateTemplate { id: String, reason: String },

    #[error("placement failed after {retries} retries: entities {first} and {second} collide at frame {frame}")]
    Composition {
        retries: usize,
        first: String,
        second: String,
        frame: usize,
    },

    #[error("placement failed after {retries} retries: {reason}")]
    Placement { retries: usize, reason: String },

    #[error("point behind camera (depth {depth} <= near plane {near})")]
    BehindCamera { depth: f64, near: f64 },

    #[error("budget {requested} exceeds the {available} distinct compositions available")]
    Budget { requested: usize, available: u128 },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("denoiser returned non-finite output at step {step}")]
    DenoiserNonFinite { step: usize },
}

impl Error {
    pub(crate) fn validation(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable class name, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::OutOfRange { .. } => "range",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Shape { .. } => "shape",
            Error::DegenerateTangent { .. } => "degenerate_tangent",
            Error::DegenerateTemplate { .. } => "degenerate_template",
            Error::Composition { .. } => "composition",
            Error::Placement { .. } => "placement",
            Error::BehindCamera { .. } => "behind_camera",
            Error::Budget { .. } => "budget",
            Error::Parse { .. } => "parse",
            Error::NonFinite { .. } => "non_finite",
            Error::DenoiserNonFinite { .. } => "non_finite",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
