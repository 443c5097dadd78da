use alloc::string::String;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} is beyond the stored length {len} and the trajectory has no extension")]
    BeyondStorage { index: usize, len: usize },

    #[error("warm start is infeasible: {0}")]
    InfeasibleStart(String),

    #[error("invariant breach at iteration {j}, step {k}: {detail}")]
    InvariantBreach { j: usize, k: usize, detail: String },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("initial trajectory recipe failed: {0}")]
    Recipe(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
