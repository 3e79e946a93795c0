use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{argmax, video_rule, EvalError, VideoVerdict};
use crate::dataset::{Dataset, Split};
use crate::models::ModelHandle;

/// Clips evaluated per forward pass.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub class_names: Vec<String>,
    pub clip_count: usize,
    pub frame_count: usize,
    pub frame_top1: f64,
    pub video_top1: f64,
    /// Video-level accuracy per true class; `None` for classes without clips.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Rows are true classes, columns predicted classes (clip level).
    pub confusion: Vec<Vec<usize>>,
    pub verdicts: Vec<VideoVerdict>,
}

/// Most frequent frame prediction; ties go to the lower class.
fn plurality(votes: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Evaluates `model` on `split`. Student frame predictions feed the
/// at-least-half rule directly; a jointnet's clip logits count as a clip
/// with one frame.
pub fn evaluate_model(model: &ModelHandle, data: &Dataset, split: Split) -> Result<EvalReport, EvalError> {
    let m = data.num_classes();
    let classes = match model {
        ModelHandle::Jointnet(j) => j.num_classes(),
        ModelHandle::Student(s) => s.num_classes(),
        ModelHandle::Backbone(_) => {
            return Err(EvalError::InvalidArgument("a bare backbone is not a classifier".into()))
        }
    };
    if classes != m {
        return Err(EvalError::ShapeMismatch(format!("model predicts {classes} classes, dataset has {m}")));
    }
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = vec![vec![0usize; m]; m];
    let mut verdicts = Vec::with_capacity(indices.len());
    let (mut frames_total, mut frames_hit) = (0usize, 0usize);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let seqs = chunk.iter().map(|&i| data.sequence(i)).collect::<Result<Vec<_>, _>>()?;
        // per clip: predicted label of every evaluated frame
        let votes: Vec<Vec<usize>> = match model {
            ModelHandle::Student(s) => {
                let (logits, offsets) = s.frame_logits(&seqs)?;
                offsets.windows(2).map(|w| (w[0]..w[1]).map(|r| argmax(logits.row(r))).collect()).collect()
            }
            _ => {
                let logits = model.clip_logits(&seqs)?;
                logits.0.rows().into_iter().map(|row| vec![argmax(row)]).collect()
            }
        };
        for ((&i, seq), preds) in chunk.iter().zip(&seqs).zip(votes) {
            let label = data.manifest().records[i].label_index;
            let hits = preds.iter().filter(|&&p| p == label).count();
            frames_total += preds.len();
            frames_hit += hits;
            confusion[label][plurality(&preds, m)] += 1;
            verdicts.push(VideoVerdict {
                clip_id: seq.clip_id.clone(),
                frames_total: preds.len(),
                frames_correct: hits,
                correct: video_rule(preds.len(), hits),
            });
        }
    }
    let mut per_class = vec![(0usize, 0usize); m];
    for (v, &i) in verdicts.iter().zip(&indices) {
        let label = data.manifest().records[i].label_index;
        per_class[label].0 += usize::from(v.correct);
        per_class[label].1 += 1;
    }
    let correct = verdicts.iter().filter(|v| v.correct).count();
    Ok(EvalReport {
        split,
        class_names: data.manifest().vocabulary.names().to_vec(),
        clip_count: verdicts.len(),
        frame_count: frames_total,
        frame_top1: frames_hit as f64 / frames_total as f64,
        video_top1: correct as f64 / verdicts.len() as f64,
        per_class_accuracy: per_class.iter().map(|&(c, n)| (n > 0).then(|| c as f64 / n as f64)).collect(),
        confusion,
        verdicts,
    })
}

impl EvalReport {
    /// Human-readable summary with the confusion matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split: {}  clips: {}  frames: {}", self.split, self.clip_count, self.frame_count);
        let _ = writeln!(s, "frame top-1: {:.4}", self.frame_top1);
        let _ = writeln!(s, "video top-1: {:.4}", self.video_top1);
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "per-class accuracy:");
        for (name, acc) in self.class_names.iter().zip(&self.per_class_accuracy) {
            let shown = acc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(s, "  {name:<width$}  {shown}");
        }
        let _ = writeln!(s, "confusion (rows true, columns predicted):");
        let _ = write!(s, "  {:<width$}", "");
        for name in &self.class_names {
            let _ = write!(s, " {name:>width$}");
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let _ = write!(s, "  {name:<width$}");
            for n in row {
                let _ = write!(s, " {n:>width$}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plurality_prefers_lower_class_on_ties() {
        assert_eq!(plurality(&[2, 1, 2, 1], 3), 1);
        assert_eq!(plurality(&[2, 2, 0], 3), 2);
    }
}
