use thiserror::Error;

/// Errors raised across the solver.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("point ({0}, {1}, {2}) lies outside the computational domain")]
    OutOfDomain(f64, f64, f64),
    #[error("matrix is not positive definite: {0}")]
    Indefinite(String),
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("singular evaluation: {0}")]
    Singular(String),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("missing eigenvalue hints for the eigenvalue-gap strategy")]
    MissingHints,
    #[error("unsupported element: {0}")]
    UnsupportedElement(String),
    #[error("config error in {field}: {msg}")]
    Config { field: String, msg: String },
    #[error("eigensolver failed at SCF iteration {iteration}, group {group}: {source}")]
    Eigen {
        iteration: usize,
        group: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
