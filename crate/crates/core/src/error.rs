use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("non-positive probability in {0}")]
    NonPositive(String),

    #[error("tensor {0} is not recorded on the path to the loss")]
    Detached(usize),

    #[error("second-order gradient path unavailable: {0}")]
    SecondOrderUnavailable(String),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidArgument { field: String, reason: String },

    #[error("label of row {0} is masked as unlabeled")]
    UnlabeledAccess(usize),

    #[error("degenerate noise oracle: {0}")]
    DegenerateOracle(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidArgument { .. } | Error::Json(_) | Error::Format(_) => true,
            Error::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            Error::Cell { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
