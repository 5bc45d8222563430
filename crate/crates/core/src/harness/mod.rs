//! Training loop, checkpointing and the three evaluation protocols:
//! fixed-step sweeps, adaptive-threshold sweeps and per-example
//! trajectories, plus the two-architecture comparison.

mod compare;
mod config;
mod eval;
mod train;

pub use compare::{compare_architectures, write_comparison_csv, ComparisonReport};
pub use config::{
    config_from_str, derive_seed, known_keys, load_config, ConfigError, DataConfig, RunConfig,
    TrainConfig, SCHEMA_VERSION,
};
pub use eval::{
    capture_trajectories, eval_adaptive, eval_adaptive_detailed, eval_fixed_steps, few_step_snapshots,
    output_norm, parse_threshold_grid, write_sweep_csv, write_trajectories_csv, AdaptiveOutcome, Selection,
    SegmentRecord, SweepReport, SweepRow, TrajectoryRecord,
};
pub use train::{train, train_in_memory, EvalRecord, MetricsRecord, TrainOutcome};

use std::path::PathBuf;

use thiserror::Error;

use crate::act::ActError;
use crate::model::ModelError;
use crate::sudoku::{generate_dataset, parse_dataset_file, PuzzleInstance, SudokuError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Act(#[from] ActError),
    #[error(transparent)]
    Sudoku(#[from] SudokuError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss at step {step}; offending batch written to {}", dump.display())]
    NonFinite { step: usize, dump: PathBuf },
}

impl From<crate::tensor::TensorError> for HarnessError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Io { context, source }
}

/// The run's puzzles: read from `data.path`, or generated from the data
/// section with a seed derived from the run seed.
pub fn load_dataset(run: &RunConfig) -> Result<Vec<PuzzleInstance>> {
    let d = &run.data;
    let puzzles = match &d.path {
        Some(path) => parse_dataset_file(path)?,
        None => generate_dataset(d.count, d.side, d.blanks, derive_seed(run.seed, "data"))?,
    };
    if puzzles.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if let Some(p) = puzzles.iter().find(|p| p.side != d.side) {
        return Err(HarnessError::InvalidArgument(format!(
            "dataset holds a {0}×{0} puzzle but data.side is {1}",
            p.side, d.side
        )));
    }
    Ok(puzzles)
}
