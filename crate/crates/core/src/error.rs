//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("degenerate division: {0}")]
    DivisionDegenerate(String),

    #[error("unknown condition '{0}'")]
    UnknownCondition(String),

    #[error("ply parse error at byte {offset}: {msg}")]
    PlyParse { offset: u64, msg: String },

    #[error("image parse error: {0}")]
    ImageParse(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("camera sampling starved after {retries} retries for slot '{slot}'")]
    SamplingStarvation { slot: String, retries: usize },

    #[error("non-finite loss at iteration {iter}")]
    NonFinite { iter: usize },

    #[error("placement collision: {0}")]
    PlacementCollision(String),

    #[error("unknown object id '{0}'")]
    UnknownObject(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-parseable category name, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::DegenerateCovariance(_) => "degenerate-covariance",
            Error::DivisionDegenerate(_) => "degenerate-division",
            Error::UnknownCondition(_) => "unknown-condition",
            Error::PlyParse { .. } => "ply-parse",
            Error::ImageParse(_) => "image-parse",
            Error::Layout(_) => "layout",
            Error::SamplingStarvation { .. } => "sampling-starvation",
            Error::NonFinite { .. } => "non-finite",
            Error::PlacementCollision(_) => "placement-collision",
            Error::UnknownObject(_) => "unknown-object",
            Error::MissingCheckpoint(_) => "missing-checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
