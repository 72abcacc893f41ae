use thiserror::Error;

/// Errors raised by model construction, analysis, and simulation.
#[derive(Debug, Error)]
pub enum SwarmError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("piece index {piece} out of range 1..={k}")]
    PieceOutOfRange { piece: u32, k: u32 },

    #[error("unsupported field order {0}: must be prime or a power of two, at most 256")]
    UnsupportedField(u16),

    #[error("vector length {got} does not match ambient dimension {want}")]
    DimensionMismatch { got: usize, want: usize },

    #[error("operation requires {0}")]
    Unsupported(String),

    #[error("simulation invariant violated: {0}")]
    InvariantViolation(String),

    #[error("certificate search failed: {0}")]
    CertificateFailure(String),
}

pub type Result<T> = std::result::Result<T, SwarmError>;
