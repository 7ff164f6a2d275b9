//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-physical input: {0}")]
    NonPhysicalInput(String),

    #[error("infeasible rating: cooling {cooling:.4} W/m does not exceed solar gain {solar:.4} W/m")]
    InfeasibleRating { cooling: f64, solar: f64 },

    #[error("division guard: {0}")]
    DivisionGuard(String),

    #[error("unstable step: {0}")]
    UnstableStep(String),

    #[error("index mismatch: {0}")]
    IndexMismatch(String),

    #[error("dominance condition violated on line {line}: {detail}")]
    DominanceViolated { line: String, detail: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("singular network: {0}")]
    SingularNetwork(String),

    #[error("unbalanced injection: net {0:.3e} MW")]
    UnbalancedInjection(f64),

    #[error("negative curvature on variable {0}")]
    NegativeCurvature(String),

    #[error("conic program is infeasible")]
    Infeasible,

    #[error("conic program is unbounded")]
    Unbounded,

    #[error("numerical failure ({status}): primal residual {r_prim:.3e}, dual residual {r_dual:.3e}")]
    NumericalFailure { status: String, r_prim: f64, r_dual: f64 },

    #[error("case mismatch: {0}")]
    CaseMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonPhysicalInput(_) => "NonPhysicalInput",
            Error::InfeasibleRating { .. } => "InfeasibleRating",
            Error::DivisionGuard(_) => "DivisionGuard",
            Error::UnstableStep(_) => "UnstableStep",
            Error::IndexMismatch(_) => "IndexMismatch",
            Error::DominanceViolated { .. } => "DominanceViolated",
            Error::Schema(_) => "SchemaError",
            Error::Validation(_) => "ValidationError",
            Error::SingularNetwork(_) => "SingularNetwork",
            Error::UnbalancedInjection(_) => "UnbalancedInjection",
            Error::NegativeCurvature(_) => "NegativeCurvature",
            Error::Infeasible => "Infeasible",
            Error::Unbounded => "Unbounded",
            Error::NumericalFailure { .. } => "NumericalFailure",
            Error::CaseMismatch(_) => "CaseMismatch",
            Error::Io { .. } => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
