//! Experiment orchestration: teacher training, distillation, λ grid search,
//! low-resource sweeps and report emission.

pub mod config;
pub mod dataset;
mod methods;
pub mod report;
mod runner;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use methods::{Grid, Method};
pub use runner::{
    distill_student, grid_cells, grid_search, low_resource_sweep, run_experiment, run_main, train_teacher, GridCell,
    GridResult, RunContext, StudentRun, TeacherRun,
};

use crate::data::DataError;
use crate::distill::LossError;
use crate::forecaster::ForecasterError;
use crate::metrics::MetricError;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ForecasterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl ExperimentError {
    /// Process exit code for the error's category.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data(DataError::Io { .. }) => 5,
            ExperimentError::Data(DataError::Config(_)) => 2,
            ExperimentError::Data(_) => 3,
            ExperimentError::Divergence { .. } => 4,
            ExperimentError::Io { .. } | ExperimentError::Checkpoint(_) => 5,
            ExperimentError::Model(ForecasterError::Config(_)) => 2,
            ExperimentError::Model(_)
            | ExperimentError::Loss(_)
            | ExperimentError::Tensor(_)
            | ExperimentError::Metric(_) => 6,
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            4 => "divergence",
            5 => "io",
            _ => "internal",
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;
