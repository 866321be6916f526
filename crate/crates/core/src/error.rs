use thiserror::Error;

use crate::expr::{DiffError, EvalError, ParseError};

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in `{name}`: {source}")]
    Parse {
        name: String,
        #[source]
        source: ParseError,
    },

    #[error("evaluating `{name}` at (z={z}, a={a}, x={x}): {source}")]
    Eval {
        name: String,
        z: f64,
        a: f64,
        x: f64,
        #[source]
        source: EvalError,
    },

    #[error("rate `{name}` is not finite at (z={z}, a={a}, x={x})")]
    NonFiniteRate {
        name: String,
        z: f64,
        a: f64,
        x: f64,
    },

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid model: {0}")]
    InvalidSpec(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite state at step {step}")]
    BlowUp { step: usize },

    #[error("{what} did not converge after {iterations} iterations (last gap {gap:e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        gap: f64,
    },

    #[error("no sign change of {what} found in [{lo}, {hi}]")]
    NotBracketed { what: String, lo: f64, hi: f64 },

    #[error("no positive homogeneous equilibrium: R(0) = {r0} <= 1")]
    NoPositiveEquilibrium { r0: f64 },

    #[error("singular tridiagonal system at row {row}")]
    Singular { row: usize },

    #[error("rate fit: {0}")]
    Fit(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
