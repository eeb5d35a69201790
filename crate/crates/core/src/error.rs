use thiserror::Error;

/// Errors raised by the quantization pipeline.
#[derive(Debug, Error)]
pub enum QueptError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported bit-width {bit} for layer {layer}")]
    UnsupportedBit { layer: String, bit: u32 },

    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: i64, expected: u32 },

    #[error("truncated blob `{name}`: need {need} bytes, have {have}")]
    Truncated { name: String, need: u64, have: u64 },

    #[error("checksum mismatch for blob `{0}`")]
    Checksum(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QueptError>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(QueptError::Argument(msg.into()))
}
