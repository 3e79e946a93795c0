use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub clip_id: String,
    pub frame_index: usize,
    pub predicted: usize,
    pub true_label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoVerdict {
    pub clip_id: String,
    pub frames_total: usize,
    pub frames_correct: usize,
    pub correct: bool,
}

/// A clip counts as correct when at least half of its frames are, i.e.
/// `frames_correct >= ceil(frames_total / 2)`.
pub fn video_rule(frames_total: usize, frames_correct: usize) -> bool {
    2 * frames_correct >= frames_total
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rank of `label` in `row`: the number of classes that beat it, where a
/// lower-index class with an equal logit also beats it.
fn rank_of(row: ArrayView1<f64>, label: usize) -> usize {
    let target = row[label];
    row.iter().enumerate().filter(|&(c, &v)| v > target || (v == target && c < label)).count()
}

pub fn topk_frame_accuracy(logits: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64, EvalError> {
    let (n, m) = logits.dim();
    if n != labels.len() {
        return Err(EvalError::ShapeMismatch(format!("{n} logit rows vs {} labels", labels.len())));
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if k == 0 || k > m {
        return Err(EvalError::InvalidArgument(format!("k = {k} outside 1..={m}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(EvalError::InvalidArgument(format!("label {bad} out of range for {m} classes")));
    }
    let hits = labels.iter().enumerate().filter(|&(i, &l)| rank_of(logits.row(i), l) < k).count();
    Ok(hits as f64 / n as f64)
}

/// Groups predictions by clip (first-appearance order) and applies the
/// at-least-half rule to each clip.
pub fn video_level_accuracy(predictions: &[FramePrediction]) -> Result<(f64, Vec<VideoVerdict>), EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut verdicts: Vec<VideoVerdict> = Vec::new();
    for p in predictions {
        let i = *slot.entry(&p.clip_id).or_insert_with(|| {
            verdicts.push(VideoVerdict {
                clip_id: p.clip_id.clone(),
                frames_total: 0,
                frames_correct: 0,
                correct: false,
            });
            verdicts.len() - 1
        });
        verdicts[i].frames_total += 1;
        verdicts[i].frames_correct += usize::from(p.predicted == p.true_label);
    }
    for v in &mut verdicts {
        v.correct = video_rule(v.frames_total, v.frames_correct);
    }
    let correct = verdicts.iter().filter(|v| v.correct).count();
    Ok((correct as f64 / verdicts.len() as f64, verdicts))
}
