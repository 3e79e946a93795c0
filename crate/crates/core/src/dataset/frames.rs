use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sample_uniform, ClipRecord, CropStrategy, DatasetError, SamplingConfig};
use crate::util::{mix_seed, stable_hash};

pub(crate) const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
pub(crate) const VIDEO_EXTENSIONS: [&str; 6] = ["mp4", "avi", "mkv", "mov", "webm", "m4v"];

/// Preprocessed frames of one clip, `T × H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub clip_id: String,
    pub frames: Array4<f32>,
    /// Which original frames were sampled, strictly increasing.
    pub source_indices: Vec<usize>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame height and width.
    pub fn spatial(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }
}

/// Random access to a clip's decoded frames as `H × W × 3` arrays in `[0, 1]`.
pub trait FrameSource {
    fn read_frames(&mut self, indices: &[usize]) -> Result<Vec<Array3<f32>>, DatasetError>;
}

/// Frames held in memory; mainly for tests and generated data.
pub struct MemorySource {
    clip_id: String,
    frames: Vec<Array3<f32>>,
}

impl MemorySource {
    pub fn new(clip_id: impl Into<String>, frames: Vec<Array3<f32>>) -> Self {
        Self { clip_id: clip_id.into(), frames }
    }
}

impl FrameSource for MemorySource {
    fn read_frames(&mut self, indices: &[usize]) -> Result<Vec<Array3<f32>>, DatasetError> {
        indices
            .iter()
            .map(|&i| {
                self.frames.get(i).cloned().ok_or_else(|| DatasetError::Frame {
                    clip_id: self.clip_id.clone(),
                    index: i,
                    message: "frame index beyond clip length".into(),
                })
            })
            .collect()
    }
}

/// A directory of numbered images `frame_0000.png`, `frame_0001.png`, ...
pub struct DirectorySource {
    clip_id: String,
    dir: PathBuf,
}

impl DirectorySource {
    pub fn new(clip_id: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self { clip_id: clip_id.into(), dir: dir.into() }
    }

    fn frame_path(&self, index: usize) -> Option<PathBuf> {
        IMAGE_EXTENSIONS.iter().map(|ext| self.dir.join(format!("frame_{index:04}.{ext}"))).find(|p| p.is_file())
    }
}

impl FrameSource for DirectorySource {
    fn read_frames(&mut self, indices: &[usize]) -> Result<Vec<Array3<f32>>, DatasetError> {
        indices
            .iter()
            .map(|&index| {
                let err = |message: String| DatasetError::Frame { clip_id: self.clip_id.clone(), index, message };
                let path = self
                    .frame_path(index)
                    .ok_or_else(|| err(format!("no frame_{index:04}.* in {}", self.dir.display())))?;
                let img = image::open(&path).map_err(|e| err(format!("{}: {e}", path.display())))?;
                Ok(rgb_to_array(&img.to_rgb32f()))
            })
            .collect()
    }
}

fn rgb_to_array(img: &image::Rgb32FImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.as_raw().clone()).expect("rgb buffer matches dimensions")
}

/// A video file decoded through the `ffmpeg` / `ffprobe` executables.
pub struct VideoSource {
    clip_id: String,
    path: PathBuf,
    decoded: Option<Vec<Array3<f32>>>,
}

impl VideoSource {
    pub fn new(clip_id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self { clip_id: clip_id.into(), path: path.into(), decoded: None }
    }

    fn decode_all(&self) -> Result<Vec<Array3<f32>>, DatasetError> {
        let (w, h) = probe_video_dims(&self.path)?;
        let out = Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(&self.path)
            .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .output()
            .map_err(|e| video_err(&self.path, format!("cannot run ffmpeg: {e}")))?;
        if !out.status.success() {
            return Err(video_err(&self.path, String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        let frame_bytes = w * h * 3;
        if frame_bytes == 0 || out.stdout.len() % frame_bytes != 0 {
            return Err(video_err(&self.path, "decoded stream size does not match frame dimensions".into()));
        }
        Ok(out
            .stdout
            .chunks_exact(frame_bytes)
            .map(|c| Array3::from_shape_fn((h, w, 3), |(y, x, ch)| c[(y * w + x) * 3 + ch] as f32 / 255.0))
            .collect())
    }
}

impl FrameSource for VideoSource {
    fn read_frames(&mut self, indices: &[usize]) -> Result<Vec<Array3<f32>>, DatasetError> {
        if self.decoded.is_none() {
            self.decoded = Some(self.decode_all()?);
        }
        let frames = self.decoded.as_ref().unwrap();
        indices
            .iter()
            .map(|&index| {
                frames.get(index).cloned().ok_or_else(|| DatasetError::Frame {
                    clip_id: self.clip_id.clone(),
                    index,
                    message: format!("video has only {} frames", frames.len()),
                })
            })
            .collect()
    }
}

fn video_err(path: &Path, message: String) -> DatasetError {
    DatasetError::Video { path: path.to_path_buf(), message }
}

fn ffprobe(path: &Path, extra: &[&str], entries: &str) -> Result<String, DatasetError> {
    let out = Command::new("ffprobe")
        .args(["-v", "error", "-select_streams", "v:0"])
        .args(extra)
        .args(["-show_entries", entries, "-of", "csv=p=0"])
        .arg(path)
        .output()
        .map_err(|e| video_err(path, format!("cannot run ffprobe: {e}")))?;
    if !out.status.success() {
        return Err(video_err(path, String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn probe_video_dims(path: &Path) -> Result<(usize, usize), DatasetError> {
    let text = ffprobe(path, &[], "stream=width,height")?;
    let mut it = text.split(',').map(|v| v.trim().parse::<usize>());
    match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) => Ok((w, h)),
        _ => Err(video_err(path, format!("unexpected ffprobe output {text:?}"))),
    }
}

pub(crate) fn probe_video_frame_count(path: &Path) -> Result<usize, DatasetError> {
    let text = ffprobe(path, &["-count_frames"], "stream=nb_read_frames")?;
    text.parse().map_err(|_| video_err(path, format!("unexpected ffprobe output {text:?}")))
}

/// Counts consecutive `frame_NNNN.*` images starting at index 0.
pub(crate) fn count_directory_frames(dir: &Path) -> Result<usize, DatasetError> {
    if !dir.is_dir() {
        return Err(DatasetError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let source = DirectorySource::new("", dir);
    Ok((0..).take_while(|&i| source.frame_path(i).is_some()).count())
}

/// Bilinear resize with half-pixel centres. Interpolates in `a + (b − a)·t`
/// form so constant images stay exactly constant.
pub fn resize_bilinear(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| coord(y, out_h, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, out_w, w)).collect();
    Array3::from_shape_fn((out_h, out_w, c), |(y, x, ch)| {
        let (y0, y1, ty) = ys[y];
        let (x0, x1, tx) = xs[x];
        let top = img[[y0, x0, ch]] + (img[[y0, x1, ch]] - img[[y0, x0, ch]]) * tx;
        let bottom = img[[y1, x0, ch]] + (img[[y1, x1, ch]] - img[[y1, x0, ch]]) * tx;
        top + (bottom - top) * ty
    })
}

fn crop_frame(img: &Array3<f32>, crop: usize, scale: f64) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let target = ((crop as f64 * scale).round() as usize).max(crop);
    let (nh, nw) = if h <= w {
        (target, ((w as f64 * target as f64 / h as f64).round() as usize).max(target))
    } else {
        (((h as f64 * target as f64 / w as f64).round() as usize).max(target), target)
    };
    let resized = resize_bilinear(img, nh, nw);
    let (oy, ox) = ((nh - crop) / 2, (nw - crop) / 2);
    resized.slice(s![oy..oy + crop, ox..ox + crop, ..]).to_owned()
}

/// Samples, decodes, crops and scales one clip.
pub fn preprocess_clip(
    record: &ClipRecord,
    source: &mut dyn FrameSource,
    config: &SamplingConfig,
) -> Result<FrameSequence, DatasetError> {
    config.validate()?;
    let indices = sample_uniform(record, config);
    let raw = source.read_frames(&indices)?;
    let scale = match config.crop_strategy {
        CropStrategy::Center => 1.0,
        CropStrategy::RandomScaleCenter => {
            let seed = mix_seed(config.seed, stable_hash(record.clip_id.as_bytes()));
            ChaCha8Rng::seed_from_u64(seed).random_range(1.0..=1.25)
        }
    };
    let crop = config.crop_size;
    let mut frames = Array4::<f32>::zeros((indices.len(), crop, crop, 3));
    for ((mut slot, img), &index) in frames.axis_iter_mut(Axis(0)).zip(&raw).zip(&indices) {
        let (h, w, c) = img.dim();
        let bad = |message: String| DatasetError::Frame { clip_id: record.clip_id.clone(), index, message };
        if c != 3 || h == 0 || w == 0 {
            return Err(bad(format!("expected H x W x 3, got {h} x {w} x {c}")));
        }
        if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("pixel values outside [0, 1]".into()));
        }
        let mut out = crop_frame(img, crop, scale);
        if let Some(n) = &config.normalization {
            for (ch, mut plane) in out.axis_iter_mut(Axis(2)).enumerate() {
                plane.mapv_inplace(|v| (v - n.mean[ch]) / n.std[ch]);
            }
        }
        slot.assign(&out);
    }
    Ok(FrameSequence { clip_id: record.clip_id.clone(), frames, source_indices: indices })
}

/// Opens the right source for a record: directories hold numbered frames,
/// anything else is treated as a video file.
pub(crate) fn open_source(record: &ClipRecord, path: PathBuf) -> Box<dyn FrameSource> {
    if path.is_dir() {
        Box::new(DirectorySource::new(record.clip_id.clone(), path))
    } else {
        Box::new(VideoSource::new(record.clip_id.clone(), path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SamplingConfig, Split};

    fn record(frames: usize) -> ClipRecord {
        ClipRecord {
            clip_id: "clip".into(),
            path: PathBuf::from("clip"),
            label_index: 0,
            split: Split::Train,
            frame_count: frames,
        }
    }

    fn ramp(h: usize, w: usize, offset: f32) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * w + x + c) as f32 * 0.001 + offset).min(1.0))
    }

    #[test]
    fn samples_and_crops_to_requested_size() {
        let frames = (0..26).map(|i| ramp(40, 60, i as f32 * 0.01)).collect();
        let mut src = MemorySource::new("clip", frames);
        let cfg = SamplingConfig { num_frames: 8, crop_size: 224, ..Default::default() };
        let seq = preprocess_clip(&record(26), &mut src, &cfg).unwrap();
        assert_eq!(seq.frames.shape(), &[8, 224, 224, 3]);
        assert_eq!(seq.source_indices, vec![1, 4, 8, 11, 14, 17, 21, 24]);
    }

    #[test]
    fn constant_frame_is_crop_invariant() {
        let mut src = MemorySource::new("clip", vec![Array3::from_elem((17, 23, 3), 0.5)]);
        let cfg = SamplingConfig { num_frames: 8, crop_size: 32, ..Default::default() };
        let seq = preprocess_clip(&record(1), &mut src, &cfg).unwrap();
        assert_eq!(seq.len(), 1);
        assert!(seq.frames.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn center_crop_is_deterministic() {
        let frames: Vec<_> = (0..5).map(|i| ramp(30, 20, i as f32 * 0.05)).collect();
        let cfg = SamplingConfig { num_frames: 3, crop_size: 16, ..Default::default() };
        let a = preprocess_clip(&record(5), &mut MemorySource::new("clip", frames.clone()), &cfg).unwrap();
        let b = preprocess_clip(&record(5), &mut MemorySource::new("clip", frames), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_scale_is_fixed_per_clip() {
        let frames: Vec<_> = (0..5).map(|i| ramp(30, 30, i as f32 * 0.05)).collect();
        let cfg = SamplingConfig {
            num_frames: 2,
            crop_size: 16,
            crop_strategy: CropStrategy::RandomScaleCenter,
            seed: 5,
            ..Default::default()
        };
        let a = preprocess_clip(&record(5), &mut MemorySource::new("clip", frames.clone()), &cfg).unwrap();
        let b = preprocess_clip(&record(5), &mut MemorySource::new("clip", frames), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.shape(), &[2, 16, 16, 3]);
    }

    #[test]
    fn corrupt_frame_reports_clip_and_index() {
        let mut bad = ramp(10, 10, 0.0);
        bad[[0, 0, 0]] = f32::NAN;
        let mut src = MemorySource::new("clip", vec![ramp(10, 10, 0.0), bad]);
        let cfg = SamplingConfig { num_frames: 2, crop_size: 8, ..Default::default() };
        let err = preprocess_clip(&record(2), &mut src, &cfg).unwrap_err();
        assert!(matches!(err, DatasetError::Frame { index: 1, ref clip_id, .. } if clip_id == "clip"));
    }

    #[test]
    fn missing_directory_frame_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut src = DirectorySource::new("clip", dir.path());
        assert!(matches!(src.read_frames(&[0]), Err(DatasetError::Frame { index: 0, .. })));
    }

    #[test]
    fn resize_identity_and_shape() {
        let img = ramp(7, 9, 0.1);
        assert_eq!(resize_bilinear(&img, 7, 9), img);
        assert_eq!(resize_bilinear(&img, 14, 3).dim(), (14, 3, 3));
    }
}
