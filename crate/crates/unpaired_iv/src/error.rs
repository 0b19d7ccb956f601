use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Fewer observations than the operation can center.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("too few observations for {folds} folds (have {available})")]
    TooFewObservations { folds: usize, available: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("matrix is not positive semidefinite: min eigenvalue {min_eig:.3e}")]
    NotPsd { min_eig: f64 },

    #[error("support not identified: {0}")]
    SupportNotIdentified(String),

    #[error("enumeration budget exceeded: {0}")]
    EnumerationBudget(String),

    #[error("unsupported generator spec: {0}")]
    UnsupportedSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("linear solve failed: {0}")]
    SolveFailed(String),
}
