use thiserror::Error;

/// Errors produced by the attention, Jacobian and bound routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("fully masked row {0}")]
    FullyMaskedRow(usize),

    #[error("invalid mask: {0}")]
    Mask(String),

    /// The operation is not defined for this attention configuration
    /// (wrong kind, untied weights, biases on L2 heads, ...).
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("degenerate iterate: W^T W b vanished during power iteration")]
    DegenerateIterate,

    #[error("jacobi eigenvalue sweep did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("non-finite objective at step {step}: {value}")]
    NonFinite { step: usize, value: f64 },

    #[error("dominance violated: lower bound {lower} exceeds upper bound {upper} (n = {n})")]
    Dominance { n: usize, lower: f64, upper: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    /// True for errors caused by bad caller input rather than runtime failure.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Domain(_)
                | Error::FullyMaskedRow(_)
                | Error::Mask(_)
                | Error::Unsupported(_)
        )
    }
}

pub const PRECONDITION_EXIT: u8 = 2;
pub const DOMINANCE_EXIT: u8 = 3;

impl Error {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Dominance { .. } => DOMINANCE_EXIT,
            e if e.is_precondition() => PRECONDITION_EXIT,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Dominance { n: 3, lower: 2.0, upper: 1.0 }.exit_code(), 3);
        assert_eq!(Error::Domain("x".into()).exit_code(), 2);
        assert_eq!(Error::FullyMaskedRow(0).exit_code(), 2);
        assert_eq!(Error::NoConvergence(5).exit_code(), 1);
    }
}
