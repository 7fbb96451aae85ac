use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("need at least {needed} distinct points, found {found}")]
    InsufficientDistinctPoints { needed: usize, found: usize },

    #[error("loss must be a 1x1 value, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("backward already ran on this tape; record a new forward pass")]
    BackwardTwice,

    #[error("graph function is not deterministic: f(p) evaluated to {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NumericalAbort {
        term: String,
        epoch: usize,
        step: usize,
    },

    #[error("{0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
