use std::io;

use thiserror::Error;

/// Errors raised across the kernel engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rank mismatch: expected rank {expected}, got {found}")]
    RankMismatch { expected: usize, found: usize },

    #[error("stride {stride} does not divide grid extent {extent}")]
    NonDivisibleStride { stride: usize, extent: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("argument {value} outside kernel domain [-1, 1]")]
    KernelDomain { value: f64 },

    #[error("numerical failure at layer {layer}: {what}")]
    NumericalFailure { layer: usize, what: String },

    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),

    #[error("feature dimension {dim} exceeds cap {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("infeasible constraints: residual {residual:e}")]
    Infeasible { residual: f64 },

    #[error("fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("run interrupted after {done} of {total} tiles")]
    Interrupted { done: usize, total: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
