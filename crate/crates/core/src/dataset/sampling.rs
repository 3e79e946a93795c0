use serde::{Deserialize, Serialize};

use super::{ClipRecord, DatasetError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropStrategy {
    /// Resize the shorter side to the crop size, then take the central square.
    #[default]
    Center,
    /// Resize the shorter side to a seeded factor in `[1, 1.25]` of the crop
    /// size before the central crop. The factor is fixed per clip.
    RandomScaleCenter,
}

/// Optional per-channel standardisation applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Frames per clip presented to models; clips with fewer frames yield all of them.
    pub num_frames: usize,
    pub crop_size: usize,
    pub crop_strategy: CropStrategy,
    pub seed: u64,
    pub normalization: Option<Normalization>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { num_frames: 8, crop_size: 224, crop_strategy: CropStrategy::Center, seed: 0, normalization: None }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_frames == 0 {
            return Err(DatasetError::Config("num_frames must be at least 1".into()));
        }
        if self.crop_size < 8 {
            return Err(DatasetError::Config(format!("crop_size {} is below the minimum of 8", self.crop_size)));
        }
        if let Some(n) = &self.normalization {
            if n.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
                return Err(DatasetError::Config("normalization std must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Segment-centre indices `floor((i + 0.5) · n / k)` for `k = min(num_frames, n)`.
pub fn uniform_indices(frame_count: usize, num_frames: usize) -> Vec<usize> {
    let k = num_frames.min(frame_count);
    (0..k).map(|i| (2 * i + 1) * frame_count / (2 * k)).collect()
}

pub fn sample_uniform(record: &ClipRecord, config: &SamplingConfig) -> Vec<usize> {
    uniform_indices(record.frame_count, config.num_frames)
}
