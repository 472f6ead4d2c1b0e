use std::path::PathBuf;

/// Errors produced by the simulation and reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("malformed field: {0}")]
    Field(String),

    #[error("mesh topology error: {0}")]
    Topology(String),

    #[error("invalid tensor at node {node}: {reason}")]
    Validity { node: usize, reason: String },

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("inadmissible data at node {node}: {reason}")]
    Admissibility { node: usize, reason: String },

    /// The two measurement pairs carry no independent frame information at
    /// `node`; this is the failure mode excluded by the second data condition.
    #[error("condition 2 violated at node {node}: {quantity} = {magnitude:.3e} is below {threshold:.3e}")]
    ConditionTwo {
        node: usize,
        quantity: &'static str,
        magnitude: f64,
        threshold: f64,
    },

    #[error("reconstruction failed: {0}")]
    Reconstruction(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
