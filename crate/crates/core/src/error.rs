use thiserror::Error;

/// Errors raised by the toolkit.
///
/// Each variant maps onto a process exit code through [`Error::exit_code`], so
/// front ends can gate on the failure class.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("polynomial degree {degree} at `{path}` exceeds the cap of {cap}")]
    DegreeOverflow { path: String, degree: u32, cap: u32 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("system is not normal (column {column} has rank {rank} < {n})")]
    NotNormal { column: usize, rank: usize, n: usize },

    #[error("system not eligible for certified mode: {0}")]
    NotEligible(String),

    #[error("derivative order {order} out of range for state dimension {n}")]
    OrderOutOfRange { order: usize, n: usize },

    #[error("matrix exponential overflow: |t|*||A|| = {0:.3e}")]
    ExpOverflow(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("internal inconsistency: {0}")]
    Inconsistent(String),

    #[error("grid CFL violation: dt*speed = {step:.3e} exceeds cell size {cell:.3e}")]
    Cfl { step: f64, cell: f64 },

    #[error("extension refused: {0}")]
    ExtensionRefused(String),
}

impl Error {
    /// Exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema { .. }
            | Error::Dimension(_)
            | Error::DegreeOverflow { .. }
            | Error::NonFinite(_)
            | Error::NotNormal { .. }
            | Error::NotEligible(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
