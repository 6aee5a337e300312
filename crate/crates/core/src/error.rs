use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("commutator residual {residual:e} exceeds tolerance {tol:e} (set the waiver to run anyway)")]
    NonCommuting { residual: f64, tol: f64 },

    #[error("matrix is singular to working precision")]
    Singular,

    #[error("scheme {0} needs diffusion Jacobians but the problem provides none")]
    MissingJacobian(&'static str),

    #[error("scheme {0} needs iterated integrals but none were supplied")]
    MissingIteratedIntegrals(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("{excluded} of {total} reference paths blew up (limit is 1%)")]
    ExclusionLimit { excluded: usize, total: usize },

    #[error("fit needs at least two rows above the floor, found {0}")]
    TooFewRows(usize),

    #[error("noise dump: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
