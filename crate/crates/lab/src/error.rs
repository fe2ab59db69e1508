use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] sfl_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("{path}:{line}: malformed metrics record: {source}")]
    Metrics {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("duplicate metric {metric:?} at step {step} in run {run_id}")]
    DuplicateMetric {
        run_id: String,
        step: u64,
        metric: String,
    },
    #[error("every point of the sweep diverged")]
    SweepFailed,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}
