//! Crate-wide error type and the exit-code contract used by the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DparnError>;

#[derive(Debug, Error)]
pub enum DparnError {
    /// Malformed or unsupported file contents (WAV chunks, weight files).
    #[error("format error: {0}")]
    Format(String),

    /// Tensor/layer shape disagreement. Carries both shapes.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Payload integrity failure when loading weights.
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    /// Training produced a non-finite loss or gradient.
    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    /// Scalar argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid run configuration (sample rate, channel count, flag values).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input that is structurally valid but unusable (silent reference, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A contract violation inside the autodiff graph (non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DparnError {
    /// Stable process exit code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DparnError::Format(_) => 2,
            DparnError::Dimension { .. } => 3,
            DparnError::Checksum { .. } => 4,
            DparnError::Divergence { .. } => 5,
            DparnError::Domain(_) => 6,
            DparnError::Config(_) => 7,
            DparnError::Degenerate(_) => 8,
            DparnError::Contract(_) => 9,
            DparnError::Io(_) => 10,
        }
    }
}

pub(crate) fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(DparnError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
