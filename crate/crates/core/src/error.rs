use thiserror::Error;

/// Errors produced by the covariance, moment, estimator, risk and design layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} requires K >= {min}, got K = {k}")]
    TooFewArms {
        what: &'static str,
        min: usize,
        k: usize,
    },

    #[error("covariance is numerically singular (condition number bound {condition:.3e})")]
    Singular { condition: f64 },

    #[error("contrast vector is zero; shrinkage factor is undefined")]
    ZeroContrast,

    #[error(
        "quadrature did not converge after {panels} panels: estimate {estimate:.12e}, error bound {error:.3e}"
    )]
    Quadrature {
        estimate: f64,
        error: f64,
        panels: usize,
    },

    #[error("approximation invalid: {0}")]
    ApproximationInvalid(&'static str),

    #[error("trial error: {0}")]
    Trial(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
