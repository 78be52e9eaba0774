use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    /// A numerical routine failed. `iteration` is the Newton iteration (1-based)
    /// when the failure happened inside a nonlinear solve.
    #[error("numeric failure{}: {message}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NumericFailure {
        message: String,
        iteration: Option<usize>,
        residual: Option<f64>,
    },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("distance failed between query {query} and reference {reference}: {source}")]
    PairFailure {
        query: usize,
        reference: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parse failures for IDX (MNIST) files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {0} outside 0..=9")]
    BadLabel(u8),
}

impl Error {
    pub(crate) fn numeric(message: impl Into<String>) -> Self {
        Error::NumericFailure {
            message: message.into(),
            iteration: None,
            residual: None,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// Attaches a Newton iteration index to a numeric failure.
    pub(crate) fn at_iteration(self, it: usize) -> Self {
        match self {
            Error::NumericFailure {
                message, residual, ..
            } => Error::NumericFailure {
                message,
                iteration: Some(it),
                residual,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
