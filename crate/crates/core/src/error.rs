use thiserror::Error;

/// Errors raised by the numerics, model, sampling and training layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown parameter: {0}")]
    UnknownParameter(String),

    #[error("operation `{0}` cannot be differentiated a second time")]
    UnsupportedOp(&'static str),

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("cannot sample a task for user `{user}`: category {category} has no ratings")]
    Unsampleable { user: String, category: u8 },

    #[error("task {index}: {source}")]
    Task {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn at_task(self, index: usize) -> Self {
        Error::Task {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
