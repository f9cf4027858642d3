use thiserror::Error;

/// Errors raised across the evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("{what} = {value} is outside [0, 1]")]
    OutOfUnitInterval { what: &'static str, value: f64 },

    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: u64,
        field: String,
        message: String,
    },

    #[error("line {line}: {message}")]
    Schema { line: u64, message: String },

    #[error("unknown schema `{0}` (expected `raw-boxes` or `precomputed`)")]
    UnknownSchema(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {what} needs at least {needed}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("x = {x} lies outside the knot span [{lo}, {hi}]")]
    OutsideDomain { x: f64, lo: f64, hi: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than the user's input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
