use thiserror::Error;

use crate::moments::MultiIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate scale for `{name}`: column is constant")]
    DegenerateScale { name: String },

    #[error("cluster `{cluster_id}` has n = {n}; at least 2 observations are required")]
    ClusterTooSmall { cluster_id: String, n: usize },

    #[error("residuals are not finite at the starting point")]
    InvalidStart,

    #[error("damping exceeded {limit:e} while rejecting non-finite steps")]
    DampingOverflow { limit: f64 },

    #[error("schema error in field `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("missing moment for multi-index {0}")]
    MissingMoment(MultiIndex),

    #[error("unexpected moment for multi-index {0}")]
    UnexpectedMoment(MultiIndex),

    #[error("order-2 moment matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NonPsd { min_eigenvalue: f64 },

    #[error("incompatible providers: {0}")]
    IncompatibleProviders(String),

    #[error("duplicate cluster id `{0}`")]
    DuplicateCluster(String),

    #[error("{path}:{line}: {reason}")]
    Csv { path: String, line: u64, reason: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
