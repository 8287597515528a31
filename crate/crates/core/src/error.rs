use thiserror::Error;

use crate::problems::Infeasibility;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("infeasible: {0}")]
    Feasibility(#[from] Infeasibility),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("{what} too large: {got} exceeds limit {limit}")]
    Size {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    #[error("rollout failed: {0}")]
    Rollout(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
