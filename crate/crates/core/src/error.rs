use std::fmt;

/// Errors raised by every operation in the crate.
///
/// The variants map onto the command-line exit codes: validation-like
/// failures exit with 1, I/O with 2, capacity and divergence with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("undefined statistic: {0}")]
    Undefined(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("closed form is undefined for alpha = 0, use simulate")]
    UseSimulate,
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("recurrence diverged at layer {layer}")]
    Divergence { layer: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn validation(msg: impl fmt::Display) -> Self {
        Error::Validation(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Capacity(_) | Error::Divergence { .. } => 3,
            Error::Context { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    /// Strips any [`Error::Context`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::Context {
            context: ctx(),
            source: Box::new(e),
        })
    }
}
