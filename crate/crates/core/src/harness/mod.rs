//! Experiment orchestration: dataset builds, training, the evaluation grids
//! and their on-disk artifacts.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ctg::GraphError;
use crate::env::EnvError;
use crate::train::ModelError;

pub mod acceptance;
mod config;
mod dataset;
mod experiments;
mod pipeline;
mod report;

pub use config::{derive_seed, AblationFlags, ExperimentConfig};
pub use dataset::{build_dataset, collection_eval_tasks, demo_path, load_dataset, write_dataset, Dataset, TaskData};
pub use experiments::{
    alternate_order, data_efficiency_sweep, evaluate, evaluate_flat, generate_graph, nll_protocol, step_generalization, ConditionRun,
    EpisodeRecord, GeneratedGraph, NllRow, ResetMode, RunRecord,
};
pub use pipeline::{train_all, TrainedModels};
pub use report::{export, load_runs, metrics_csv, save_run, MetricsRecord, METRICS_HEADER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("task {task}: {message}")]
    Task { task: u64, message: String },
    #[error("missing run files: {}", list(.0))]
    Missing(Vec<PathBuf>),
}

fn list(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Writes `contents`, creating parent directories.
pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}
