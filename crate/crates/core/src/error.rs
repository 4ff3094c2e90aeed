use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidModel(String),
    #[error("unsupported spin {0}; only 1/2 and 3/2 have qubit encodings")]
    UnsupportedSpin(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("state has zero norm")]
    ZeroNorm,
    #[error("compression target unreachable: fidelity loss {loss:.3e} exceeds tolerance {tol:.3e} at chi_max={chi_max}")]
    TargetUnreachable { loss: f64, tol: f64, chi_max: usize },
    #[error("tensor is not an isometry (residual {0:.3e})")]
    NotIsometric(f64),
    #[error("dimension {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("program error: {0}")]
    Program(String),
    #[error("no accepted shots")]
    NoAcceptedShots,
    #[error("missing input: {0}")]
    Missing(String),
    #[error("hilbert space dimension {0} exceeds the oracle cap of 2^20")]
    DimensionCap(usize),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
