use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("contact slot layout differs between states")]
    SlotMismatch,
    #[error("invalid time step {0} s")]
    InvalidTimeStep(f64),
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),
    #[error("leg {0} is not in contact")]
    SwingLeg(usize),
    #[error("leg {0} already has a contact slot")]
    ContactAlreadyTracked(usize),
    #[error("leg {0} has no contact slot")]
    ContactNotTracked(usize),
    #[error("leg index {0} out of range")]
    InvalidLeg(usize),
    #[error("fix is {age:.3} s old, limit is {limit:.3} s")]
    StaleFix { age: f64, limit: f64 },
    #[error("innovation covariance is ill-conditioned (cond {0:e})")]
    IllConditioned(f64),
    #[error("no observation blocks to stack")]
    EmptyObservation,
    #[error("fix at {0:.3} s lies outside the smoother window")]
    FixOutsideWindow(f64),
    #[error("normal equations are singular or indefinite")]
    SingularSystem,
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error("foot target out of reach for leg {0}")]
    Unreachable(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid settings or command-line input.
    Config,
    /// Missing, malformed or inconsistent input data.
    Data,
    /// A numerical failure inside an estimator or solver.
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Data(_)
            | Error::Io(_)
            | Error::EmptyObservation
            | Error::StaleFix { .. }
            | Error::FixOutsideWindow(_)
            | Error::InvalidTimeStep(_)
            | Error::InvalidLeg(_)
            | Error::SwingLeg(_)
            | Error::ContactAlreadyTracked(_)
            | Error::ContactNotTracked(_)
            | Error::SlotMismatch
            | Error::DimensionMismatch { .. } => ErrorClass::Data,
            Error::NotPositiveDefinite(_)
            | Error::IllConditioned(_)
            | Error::SingularSystem
            | Error::RegistrationFailed(_)
            | Error::Unreachable(_) => ErrorClass::Numerical,
        }
    }
}
