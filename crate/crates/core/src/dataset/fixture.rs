use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stratified_split, ClassVocabulary, ClipManifest, ClipRecord, DatasetError, Split};

const SOCCER_CLASSES: [&str; 4] = ["Dribble", "Kick", "Run", "Walk"];

/// Parameters of a generated, class-separable clip collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frame_count: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl FixtureSpec {
    pub fn new(num_classes: usize, clips_per_class: usize, frame_count: usize, image_size: usize, seed: u64) -> Self {
        Self { num_classes, clips_per_class, frame_count, image_size, seed, train_fraction: default_train_fraction() }
    }
}

/// Mean colour of class `c` out of `m`: evenly spaced hues.
fn class_color(c: usize, m: usize) -> [f32; 3] {
    let hue = c as f32 / m as f32 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

fn class_names(m: usize) -> Vec<String> {
    (0..m)
        .map(|c| if m <= SOCCER_CLASSES.len() { SOCCER_CLASSES[c].to_string() } else { format!("action_{c:02}") })
        .collect()
}

/// Writes `out_dir/clips/<clip_id>/frame_NNNN.png` plus `out_dir/manifest.jsonl`.
///
/// Every pixel is the class colour plus seeded noise, with a bright square
/// drifting across the frame over time. Output is a pure function of `spec`.
pub fn make_synthetic_fixture(out_dir: &Path, spec: &FixtureSpec) -> Result<ClipManifest, DatasetError> {
    if spec.num_classes == 0 || spec.clips_per_class == 0 || spec.frame_count == 0 || spec.image_size == 0 {
        return Err(DatasetError::Config("fixture arguments must all be positive".into()));
    }
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| DatasetError::io(p, e)
    };
    let vocabulary = ClassVocabulary::new(class_names(spec.num_classes))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let square = (size / 4).max(1);
    let mut records = Vec::new();

    for class in 0..spec.num_classes {
        let color = class_color(class, spec.num_classes);
        for j in 0..spec.clips_per_class {
            let clip_id = format!("{}_{j:03}", vocabulary.names()[class].to_lowercase());
            let rel = PathBuf::from("clips").join(&clip_id);
            let dir = out_dir.join(&rel);
            std::fs::create_dir_all(&dir).map_err(io(&dir))?;
            let start = rng.random_range(0..size);
            for f in 0..spec.frame_count {
                let offset = (start + f * size / spec.frame_count.max(1)) % size;
                let mut img = image::RgbImage::new(size as u32, size as u32);
                for (x, y, px) in img.enumerate_pixels_mut() {
                    let (x, y) = (x as usize, y as usize);
                    let lit = (x + size - offset) % size < square
                        && y >= size / 2 - square / 2
                        && y < size / 2 + square / 2 + 1;
                    for (out, &c) in px.0.iter_mut().zip(&color) {
                        let noise: f32 = rng.random_range(-0.1..0.1);
                        let base = if lit { 0.95 } else { c };
                        *out = ((base + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
                let path = dir.join(format!("frame_{f:04}.png"));
                img.save(&path).map_err(|e| DatasetError::Frame {
                    clip_id: clip_id.clone(),
                    index: f,
                    message: e.to_string(),
                })?;
            }
            records.push(ClipRecord {
                clip_id,
                path: rel,
                label_index: class,
                split: Split::Train,
                frame_count: spec.frame_count,
            });
        }
    }
    stratified_split(&mut records, spec.train_fraction, spec.seed);
    let manifest = ClipManifest::new(vocabulary, records, out_dir)?;
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
