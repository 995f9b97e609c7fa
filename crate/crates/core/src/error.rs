use thiserror::Error;

/// Errors produced by the simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration or input file is malformed or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// The requested duration cannot be represented in 64-bit ticks.
    #[error("timestamp overflow: durations above {max_duration_s:.3e} s are not representable at {resolution_ps} ps resolution")]
    TickOverflow { max_duration_s: f64, resolution_ps: u32 },

    /// A nonlinear fit did not converge or hit a parameter bound.
    #[error("fit failed: {reason}")]
    FitFailed { reason: String, residuals: Vec<f64> },

    /// The data does not have the structure the analysis expects.
    #[error("structural error: {0}")]
    Structure(String),

    /// A linear system or covariance matrix is singular.
    #[error("singular system: {0}")]
    Singular(String),

    /// Maximum-likelihood reconstruction failed on every restart.
    #[error("reconstruction did not converge after {restarts} restarts (best likelihood {best_likelihood:.6e})")]
    NotConverged {
        restarts: usize,
        best_likelihood: f64,
        best: Box<crate::tomography::Reconstruction>,
    },

    /// Malformed binary or text data.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of an iterative fit or optimizer.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(self, Error::FitFailed { .. } | Error::NotConverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
