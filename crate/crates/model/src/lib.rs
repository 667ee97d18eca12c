//! Graph-attention variational recurrent model for multi-agent trajectory
//! forecasting: configuration, preprocessing, the network, training and
//! the connectivity ablation.

pub mod ablation;
pub mod config;
pub mod features;
pub mod model;
pub mod train;

pub use config::{BetaSchedule, ExperimentConfig, ModelConfig, ResidualMode, TrainConfig};
pub use model::{CamNet, GaussianDiag, SampleOptions, ScenarioSamples};

use camnet_autodiff::{AutodiffError, CheckpointError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("numerical failure in batch {batch} of epoch {epoch}: {source}")]
    NonFinite { epoch: usize, batch: usize, source: AutodiffError },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

impl ModelError {
    /// True for NaN/inf aborts.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::NonFinite { .. } | ModelError::Autodiff(AutodiffError::NonFiniteValue { .. })
        )
    }
}
