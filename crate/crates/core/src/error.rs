use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("assembly failure: {0}")]
    AssemblyFailure(String),
    #[error("lumping failure: non-positive diagonal entry {value:e} at row {row}")]
    LumpingFailure { row: usize, value: f64 },
    #[error("eigenvalue estimation did not converge after {iterations} iterations (last estimate {last:e})")]
    EstimationFailure { iterations: usize, last: f64 },
    #[error("time integration became unstable at step {step}")]
    Instability { step: usize },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn out_of_range(msg: impl Into<String>) -> Self {
        Error::OutOfRange(msg.into())
    }

    /// Failures raised by the numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::AssemblyFailure(_)
                | Error::LumpingFailure { .. }
                | Error::EstimationFailure { .. }
                | Error::Instability { .. }
        )
    }
}
