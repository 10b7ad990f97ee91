use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
///
/// Variants split into two families: input problems (bad files, bad flags,
/// inconsistent annotations) and internal invariant violations. The CLI maps
/// the first family to exit code 2 and the second to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("inconsistent annotation: {0}")]
    Consistency(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("window of {len} tokens exceeds window_len {max}")]
    Size { len: usize, max: usize },

    #[error("entity lexicon is empty: use the STM strategy or supply NER annotations")]
    EmptyLexicon,

    #[error("unresolved document ids: {}", .0.join(", "))]
    Resolution(Vec<String>),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch_index} (learning rate {learning_rate})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch_index: u64,
        learning_rate: f64,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for failures caused by the program itself rather than its inputs.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
