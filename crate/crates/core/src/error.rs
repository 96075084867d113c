use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix market parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported matrix market content: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("{0} must be square")]
    NotSquare(&'static str),

    #[error("{0} must be symmetric")]
    NotSymmetric(&'static str),

    #[error("operator does not provide a transpose product")]
    NoTranspose,

    #[error("singular matrix: {n_zero} zero pivot(s)")]
    Singular { n_zero: usize },

    #[error("starting point violates B x0 - C y0 = 0 (residual {residual:.3e})")]
    InfeasibleStart { residual: f64 },

    #[error("preconditioner is indefinite on the constraint nullspace ({context}: {value:.3e})")]
    Indefinite { context: &'static str, value: f64 },

    #[error(
        "inertia condition violated: {neg_p} negative eigenvalues in P plus {neg_c} in C differ from m = {m}"
    )]
    AssumptionViolated { neg_p: usize, neg_c: usize, m: usize },

    #[error("b2 must be zero for a direct solver call; use the general right-hand-side driver")]
    NonzeroB2,

    #[error("step requested after the process terminated")]
    Terminated,

    #[error("size {size} exceeds the dense oracle cap of {cap}")]
    SizeCap { size: usize, cap: usize },

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("invalid interior-point state: {0}")]
    InvalidState(String),

    #[error("problem generation failed: {0}")]
    Generation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
