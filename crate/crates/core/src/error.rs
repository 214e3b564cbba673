use std::io;

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or grid dimensions disagree.
    #[error("shape error on {axis}: expected {expected}, got {actual}")]
    Shape {
        axis: String,
        expected: String,
        actual: String,
    },

    /// A structural parameter is invalid (bad strides, cp too short, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input is degenerate for the requested operation (e.g. all-zero grid).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("training error: {0}")]
    Training(String),

    /// Non-finite value encountered where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(axis: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            axis: axis.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
