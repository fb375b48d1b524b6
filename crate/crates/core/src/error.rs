use thiserror::Error;

use crate::solver::RootVector;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid Lévy measure: {0}")]
    InvalidMeasure(String),

    #[error("no closed form for {0} measures; use quadrature")]
    UnsupportedMeasure(&'static str),

    #[error("quadrature did not converge: error estimate {est_error:e} exceeds tol {tol:e} after {panels} panels")]
    Nonconvergence {
        est_error: f64,
        tol: f64,
        panels: usize,
    },

    #[error("zero jump mass above eps = {0}")]
    ZeroTailMass(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown reference example {0}; expected 1 or 2")]
    UnknownExample(u32),

    #[error("degenerate system: {0}")]
    DegenerateSystem(String),

    #[error("no admissible root among {} candidates", .roots.len())]
    NoAdmissibleRoot { roots: Vec<RootVector> },

    #[error("solution is not admissible: {0}")]
    NotAdmissible(String),

    #[error("{flagged} of {total} paths produced a non-finite state")]
    FlaggedPaths { flagged: usize, total: usize },

    #[error("unsupported simulation setup: {0}")]
    UnsupportedScheme(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
