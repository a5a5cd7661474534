use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid sparse matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),

    #[error("non-positive rate {value} at pixel {index}")]
    NonPositiveRate { index: usize, value: f64 },

    #[error("invalid variance {0}")]
    InvalidVariance(f64),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("hessian of the hyperparameter log-posterior is not negative definite (eigenvalues {0:?})")]
    IndefiniteHessian([f64; 2]),

    #[error("grid exploration exceeded {0} integration points")]
    ExplosionGuard(usize),

    #[error("empty integration point set")]
    EmptyPointSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),

    #[error("truncated PGM data: expected {expected} samples, found {found}")]
    TruncatedData { expected: usize, found: usize },

    #[error("unsupported magic number {0:?}")]
    UnsupportedMagic(String),

    #[error("image is constant (I_max = I_min = {0})")]
    ConstantImage(f64),

    #[error("pooled dynamic range of the image pair is zero")]
    DegenerateRange,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::NonPositiveRate { .. }
            | Error::NoConvergence(_)
            | Error::IndefiniteHessian(_)
            | Error::ExplosionGuard(_)
            | Error::EmptyPointSet => ErrorKind::Numerical,
            Error::Io { .. } | Error::Format(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
