//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument or configuration value violated a precondition.
    #[error("validation: {0}")]
    Validation(String),

    /// The requested operation needs a capability the model does not declare
    /// (e.g. state perturbation on a non-perturbable model).
    #[error("capability: {0}")]
    Capability(String),

    /// A text input (model spec, word-vector file, config) failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An exhaustive enumeration would exceed the safety guard.
    #[error("enumeration budget exceeded: {requested} sequences > guard {guard}")]
    BudgetExceeded { requested: u128, guard: u64 },

    /// A metric is undefined on the given input (e.g. no k-grams exist).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Experiment configuration problem detected before decoding starts.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code convention: 1 for anything caught by up-front
    /// validation, 2 for failures at decode/run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Capability(_)
            | Error::Parse { .. }
            | Error::BudgetExceeded { .. }
            | Error::UndefinedMetric(_)
            | Error::Config(_) => 1,
            Error::Io(_) => 2,
        }
    }
}
