use thiserror::Error;

/// Errors surfaced by the library. Numerical failures (divergence,
/// non-convergence) are separated from caller mistakes (bad parameters,
/// mismatched grids) so the CLI can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("field diverged (NaN or Inf) at step {step}, t = {time}")]
    Diverged { step: usize, time: f64 },

    #[error("snapshot format: {0}")]
    SnapshotFormat(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the computation itself rather than of its setup.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
