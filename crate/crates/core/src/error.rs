use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A sampling request asked for more items than the pool holds.
    #[error("insufficient samples: requested {requested}, available {available}")]
    Capacity { requested: usize, available: usize },

    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("architecture mismatch: expected `{expected}`, got `{actual}`")]
    ArchMismatch { expected: String, actual: String },

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    TrainingDivergence { epoch: usize, batch: usize },

    #[error("knowledge transfer diverged (non-finite loss) at epoch {epoch}")]
    TransferDivergence { epoch: usize },

    /// A stage of a federated round failed and the round was aborted.
    #[error("round {round} aborted in stage `{stage}`: {source}")]
    Stage {
        round: usize,
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    /// True when the error (or the error wrapped by a stage failure) is a
    /// numerical divergence rather than a configuration or I/O problem.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::TrainingDivergence { .. } | Error::TransferDivergence { .. } => true,
            Error::Stage { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
