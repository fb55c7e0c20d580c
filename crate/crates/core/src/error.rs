use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error("invalid prior configuration: {0}")]
    Prior(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("data inconsistent with cause spec: {0}")]
    Inconsistent(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("sampler failure at iteration {iteration}: {message}")]
    Sampler { iteration: usize, message: String },
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
