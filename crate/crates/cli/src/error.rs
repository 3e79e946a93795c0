use std::fmt;

use kdaction::dataset::DatasetError;
use kdaction::evaluation::EvalError;
use kdaction::experiment::ExperimentError;
use kdaction::losses::LossError;
use kdaction::training::{CheckpointError, TrainError};

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Self { code: EXIT_IO, message: format!("{}: {err}", path.display()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn dataset_code(e: &DatasetError) -> u8 {
    match e {
        DatasetError::Io { .. } | DatasetError::Frame { .. } | DatasetError::Video { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn checkpoint_code(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::Io { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Diverged { .. } | TrainError::Loss(LossError::NonFinite) => EXIT_NUMERIC,
        TrainError::Dataset(d) => dataset_code(d),
        TrainError::Checkpoint(c) => checkpoint_code(c),
        _ => EXIT_USAGE,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Io { .. } | EvalError::Plot(_) => EXIT_IO,
        EvalError::Dataset(d) => dataset_code(d),
        EvalError::Run { source, .. } => experiment_code(source),
        _ => EXIT_USAGE,
    }
}

fn experiment_code(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::Io { .. } => EXIT_IO,
        ExperimentError::Dataset(d) => dataset_code(d),
        ExperimentError::Train(t) => train_code(t),
        ExperimentError::Eval(v) => eval_code(v),
        ExperimentError::Checkpoint(c) => checkpoint_code(c),
        ExperimentError::Config(_) | ExperimentError::Model(_) => EXIT_USAGE,
    }
}

macro_rules! classify {
    ($($ty:ty => $f:expr),* $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self { code: $f(&e), message: e.to_string() }
            }
        }
    )*};
}

classify! {
    DatasetError => dataset_code,
    CheckpointError => checkpoint_code,
    TrainError => train_code,
    EvalError => eval_code,
    ExperimentError => experiment_code,
}
