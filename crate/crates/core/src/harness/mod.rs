//! Batch entry points: data generation, training, evaluation, ablation and
//! inspection.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod train;

use crate::backbone::BackboneError;
use crate::env::dataset::DatasetError;
use crate::env::EnvError;
use crate::msm::MsmError;
use crate::tensor::NumError;

pub use config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] BackboneError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Memory(#[from] MsmError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("version mismatch: {0}")]
    Version(String),
    #[error("non-finite training loss at step {step}")]
    NanLoss { step: u64 },
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| HarnessError::Io { path: path.display().to_string(), source }
    }
}
