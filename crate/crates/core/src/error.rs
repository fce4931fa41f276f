use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("Fock cutoff {cutoff} too small: norm defect {defect:.3e} exceeds tolerance {tolerance:.1e}")]
    CutoffTooSmall {
        cutoff: usize,
        defect: f64,
        tolerance: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hermitian (defect {0:.3e})")]
    NotHermitian(f64),

    #[error("subsystem index {index} out of range for {count} subsystems")]
    SubsystemOutOfRange { index: usize, count: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical integration did not converge: {0}")]
    Integration(String),

    #[error("degenerate vacuum reference: {0}")]
    DegenerateVacuum(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("inconsistent source model: {0}")]
    InconsistentSource(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
