//! Clip manifests, frame sampling and preprocessing, batching, and the
//! synthetic fixture generator.

mod batching;
mod fixture;
mod frames;
mod manifest;
mod sampling;

pub use batching::{make_batches, Batches, ClipBatch, Dataset};
pub use fixture::{make_synthetic_fixture, FixtureSpec};
pub use frames::{
    preprocess_clip, resize_bilinear, DirectorySource, FrameSequence, FrameSource, MemorySource, VideoSource,
};
pub use manifest::{
    scan_clip_tree, stratified_split, ClassVocabulary, ClipManifest, ClipRecord, Split, MANIFEST_VERSION,
};
pub use sampling::{sample_uniform, uniform_indices, CropStrategy, Normalization, SamplingConfig};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("manifest line {line}: duplicate clip_id {clip_id:?}")]
    DuplicateClip { line: usize, clip_id: String },
    #[error("manifest line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("unsupported manifest version {0:?}")]
    UnsupportedVersion(String),
    #[error("invalid class vocabulary: {0}")]
    Vocabulary(String),
    #[error("split {0} has no records")]
    EmptySplit(Split),
    #[error("clip {clip_id}: frame {index}: {message}")]
    Frame { clip_id: String, index: usize, message: String },
    #[error("invalid sampling config: {0}")]
    Config(String),
    #[error("video decoding failed for {path}: {message}")]
    Video { path: PathBuf, message: String },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
