use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema violation: variable `{variable}`: {message}")]
    Schema { variable: String, message: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("variable `{variable}` has a degenerate range [{min}, {max}]")]
    DegenerateRange { variable: String, min: f64, max: f64 },

    #[error("variable `{0}` has no numeric range; fit ranges on training data first")]
    MissingRange(String),

    #[error("episode `{patient}` has {length} steps, exceeding the maximum length {max}")]
    EpisodeTooLong { patient: String, length: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("csv parse error at row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("diffusion step {step} outside 1..={steps}")]
    Step { step: usize, steps: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular schedule: alpha_bar is zero at step {0}")]
    Singular(usize),

    #[error("non-finite values in layer `{0}`")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: total loss {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Stable machine-readable tag of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::InvalidSchema(_) => "invalid_schema",
            Error::DegenerateRange { .. } => "degenerate_range",
            Error::MissingRange(_) => "missing_range",
            Error::EpisodeTooLong { .. } => "episode_too_long",
            Error::Shape(_) => "shape",
            Error::Decode(_) => "decode",
            Error::Csv { .. } => "csv",
            Error::Step { .. } => "step",
            Error::Parameter(_) => "parameter",
            Error::Singular(_) => "singular",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateVariance(_) => "degenerate_variance",
            Error::NotApplicable(_) => "not_applicable",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
