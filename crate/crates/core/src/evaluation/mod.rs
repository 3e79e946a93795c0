//! Frame- and video-level accuracy, model evaluation reports, ablation
//! sweeps and curve export.

mod curves;
mod metrics;
mod report;
mod sweep;

pub use curves::{
    export_curves, history_to_csv, parse_history_csv, read_history, render_curves, write_history, HISTORY_COLUMNS,
};
pub use metrics::{argmax, topk_frame_accuracy, video_level_accuracy, video_rule, FramePrediction, VideoVerdict};
pub use report::{evaluate_model, EvalReport};
pub use sweep::{run_sweep, sweep_dir, SweepAxis, SweepResult, SweepRow, DEFAULT_SEEDS};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed history: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("rendering failed: {0}")]
    Plot(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("setting {setting}, seed {seed}: {source}")]
    Run {
        setting: String,
        seed: u64,
        #[source]
        source: Box<crate::experiment::ExperimentError>,
    },
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}
