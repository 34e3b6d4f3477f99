use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or inconsistent input. Row numbers are 1-based and count the header.
    #[error("{0}")]
    Validation(String),
    #[error("Newton iteration did not converge after {iterations} iterations (window {window})")]
    NoConvergence { window: String, iterations: usize },
    #[error("non-finite likelihood: {0}")]
    NonFinite(String),
    /// The null variance estimate of the frailty field is zero, so every LLR is undefined.
    #[error("degenerate frailty field: {0}")]
    DegenerateField(String),
    #[error("{0}")]
    Numerical(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by the inputs rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Validation(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
