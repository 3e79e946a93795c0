//! Teacher fine-tuning and student distillation loops with seeded
//! determinism, checkpointing and per-epoch history.

mod checkpoint;
mod config;
mod history;

pub use checkpoint::{
    apply_state, build_from_spec, capture_state, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
    NamedTensor, OptimizerKind, OptimizerSnapshot, TensorKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{
    cosine_annealing_lr, DistillStage, Schedule, StudentOptimizer, StudentTrainConfig, TeacherOptimizer,
    TeacherTrainConfig,
};
pub use history::{EpochRecord, RunHistory};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::dataset::{ClipBatch, Dataset, DatasetError, FrameSequence, Split};
use crate::evaluation::{argmax, video_rule};
use crate::losses::{cross_entropy, distillation_loss, soft_target_loss, DistillParams, LossError, OneHotTarget};
use crate::models::{
    aggregate_clip_logits, count_parameters, Aggregation, Backbone, ModelError, ModelHandle, ModelSpec, Student,
};
use crate::nn::{clip_grad_norm, set_trainable, zero_grad, Optimizer, ParamTree, TrainCtx};
use crate::util::mix_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model has no trainable parameters")]
    NoTrainableParameters,
    #[error("teacher has {0} trainable parameters; freeze it before distillation")]
    TeacherNotFrozen(u64),
    #[error("{what}: expected {expected} classes, found {found}")]
    ClassMismatch { what: &'static str, expected: usize, found: usize },
    #[error("wrong model kind: {0}")]
    WrongModel(&'static str),
    #[error("non-finite loss at epoch {epoch}{}", step.map(|s| format!(", step {s}")).unwrap_or_else(|| " (validation)".into()))]
    Diverged { epoch: usize, step: Option<usize> },
    #[error("{0} changed during training")]
    FrozenStateChanged(&'static str),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Run-level knobs that do not change the optimisation itself.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where `best.ckpt` and `last.ckpt` go; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this checkpoint (model, optimizer and history).
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs, keeping the configured
    /// schedule length.
    pub stop_after: Option<usize>,
    /// Stored verbatim in every checkpoint.
    pub config_snapshot: serde_json::Value,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelHandle,
    pub history: RunHistory,
    /// Best checkpoint produced during this call, if any epoch improved on
    /// the resumed history.
    pub best: Option<Checkpoint>,
    pub best_epoch: usize,
    pub last: Checkpoint,
}

/// Marks every parameter of `model` as frozen and clears its gradients.
pub fn freeze(model: &mut ModelHandle) {
    set_trainable(model, false);
    zero_grad(model);
}

fn diverged(epoch: usize, step: Option<usize>) -> impl Fn(LossError) -> TrainError {
    move |e| match e {
        LossError::NonFinite => TrainError::Diverged { epoch, step },
        other => TrainError::Loss(other),
    }
}

fn targets(labels: &[usize]) -> Vec<OneHotTarget> {
    labels.iter().copied().map(OneHotTarget).collect()
}

struct Drive {
    history: RunHistory,
    best: Option<Checkpoint>,
    best_epoch: usize,
    last: Checkpoint,
}

/// Shared epoch driver: resume, best/last bookkeeping and checkpoint files.
fn drive<M, F>(
    model: &mut M,
    spec: ModelSpec,
    fresh: Optimizer,
    seed: u64,
    epochs: usize,
    options: &RunOptions,
    mut run_epoch: F,
) -> Result<Drive, TrainError>
where
    M: ParamTree,
    F: FnMut(&mut M, &mut Optimizer, usize) -> Result<EpochRecord, TrainError>,
{
    let (mut opt, mut history, start) = match &options.resume {
        Some(ck) => {
            if ck.model != spec {
                return Err(TrainError::Config("resume checkpoint describes a different model".into()));
            }
            if ck.seed != seed {
                return Err(TrainError::Config(format!(
                    "resume checkpoint seed {} differs from config seed {seed}",
                    ck.seed
                )));
            }
            if ck.history.len() != ck.epoch {
                return Err(TrainError::Config("resume checkpoint history does not match its epoch".into()));
            }
            apply_state(model, &ck.state)?;
            (ck.restore_optimizer()?.unwrap_or(fresh), ck.history.clone(), ck.epoch)
        }
        None => (fresh, RunHistory::default(), 0),
    };
    if start > epochs {
        return Err(TrainError::Config(format!("resume epoch {start} exceeds configured epochs {epochs}")));
    }
    let end = options.stop_after.map_or(epochs, |s| s.clamp(start, epochs));
    let mut best_rec = history.best().copied();
    let mut best = None;
    let snapshot = |model: &M, opt: &Optimizer, history: &RunHistory| {
        Checkpoint::capture(
            spec.clone(),
            model,
            history.len(),
            seed,
            options.config_snapshot.clone(),
            history.clone(),
            Some(opt),
        )
    };
    for epoch in start + 1..=end {
        let rec = run_epoch(model, &mut opt, epoch)?;
        if !rec.is_finite() {
            return Err(TrainError::Diverged { epoch, step: None });
        }
        history.records.push(rec);
        log::info!(
            "epoch {epoch}/{epochs} lr {:.3e} train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}",
            rec.lr,
            rec.train_loss,
            rec.train_acc,
            rec.val_loss,
            rec.val_acc
        );
        if best_rec.is_none_or(|b| history::better(&rec, &b)) {
            best_rec = Some(rec);
            let ck = snapshot(model, &opt, &history);
            if let Some(dir) = &options.checkpoint_dir {
                save_checkpoint(&ck, dir.join("best.ckpt"))?;
            }
            best = Some(ck);
        }
    }
    let last = snapshot(model, &opt, &history);
    if let Some(dir) = &options.checkpoint_dir {
        save_checkpoint(&last, dir.join("last.ckpt"))?;
    }
    Ok(Drive { history, best, best_epoch: best_rec.map_or(0, |b| b.epoch), last })
}

fn step_optimizer<M: ParamTree>(model: &mut M, opt: &mut Optimizer, lr: f64, clip: Option<f64>) {
    if let Some(c) = clip {
        clip_grad_norm(model, c);
    }
    opt.step(model, lr);
}

#[derive(Default)]
struct Sums {
    loss: f64,
    ce: f64,
    kl: f64,
    correct: usize,
    count: usize,
}

impl Sums {
    fn add(&mut self, n: usize, loss: f64, ce: f64, kl: f64, correct: usize) {
        let w = n as f64;
        self.loss += loss * w;
        self.ce += ce * w;
        self.kl += kl * w;
        self.correct += correct;
        self.count += n;
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.count.max(1) as f64
    }

    fn acc(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

// ---------------------------------------------------------------- teacher

/// Fine-tunes the adapter and FrontNet of a jointnet with cross-entropy.
/// Backbone features are computed once per clip since the backbone is frozen.
pub fn train_teacher(
    model: ModelHandle,
    data: &Dataset,
    config: &TeacherTrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let ModelHandle::Jointnet(mut net) = model else {
        return Err(TrainError::WrongModel("train_teacher expects a jointnet"));
    };
    data.manifest().require_splits()?;
    if net.num_classes() != data.num_classes() {
        return Err(TrainError::ClassMismatch {
            what: "teacher head",
            expected: data.num_classes(),
            found: net.num_classes(),
        });
    }
    if count_parameters(&net, true) == 0 {
        return Err(TrainError::NoTrainableParameters);
    }
    let backbone_before = net.backbone_checksum();
    let features = backbone_features(net.backbone(), data, config.batch_size)?;
    let stack = |idx: &[usize]| {
        let mut x = Array2::<f64>::zeros((idx.len(), features.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).assign(&features.row(i));
        }
        x
    };
    let val_idx = data.split_indices(Split::Val);
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| data.manifest().records[i].label_index).collect();
    let val_x = stack(&val_idx);

    let spec = net.spec();
    let seed = config.seed;
    let result = drive(&mut net, spec, config.optimizer.build(), seed, config.epochs, options, |net, opt, epoch| {
        let lr = config.learning_rate_at(epoch - 1);
        let mut ctx = TrainCtx::new(mix_seed(seed, 2 * epoch as u64 + 1));
        let mut sums = Sums::default();
        for (step, batch) in
            data.batches(Split::Train, config.batch_size, mix_seed(seed, 2 * epoch as u64))?.enumerate()
        {
            let batch = batch?;
            let x = stack(&batch.record_indices);
            zero_grad(net);
            let logits = net.head_forward(&x, &mut ctx);
            let loss = cross_entropy(logits.view(), &targets(&batch.labels)).map_err(diverged(epoch, Some(step)))?;
            if !loss.value.is_finite() {
                return Err(TrainError::Diverged { epoch, step: Some(step) });
            }
            net.head_backward(&loss.grad);
            step_optimizer(net, opt, lr, config.grad_clip);
            let correct = batch.labels.iter().enumerate().filter(|&(r, &l)| argmax(logits.row(r)) == l).count();
            sums.add(batch.len(), loss.value, loss.value, 0.0, correct);
        }
        let logits = net.head_infer(&val_x);
        let val = cross_entropy(logits.view(), &targets(&val_labels)).map_err(diverged(epoch, None))?;
        let val_correct = val_labels.iter().enumerate().filter(|&(r, &l)| argmax(logits.row(r)) == l).count();
        Ok(EpochRecord {
            epoch,
            train_loss: sums.mean(sums.loss),
            train_acc: sums.acc(),
            val_loss: val.value,
            val_acc: val_correct as f64 / val_labels.len() as f64,
            lr,
            ce_part: sums.mean(sums.ce),
            kl_part: 0.0,
        })
    })?;
    if net.backbone_checksum() != backbone_before {
        return Err(TrainError::FrozenStateChanged("backbone"));
    }
    Ok(TrainOutcome {
        model: ModelHandle::Jointnet(net),
        history: result.history,
        best: result.best,
        best_epoch: result.best_epoch,
        last: result.last,
    })
}

/// Backbone outputs for every record, row `i` for record `i`.
fn backbone_features(backbone: &Backbone, data: &Dataset, chunk: usize) -> Result<Array2<f64>, TrainError> {
    let n = data.manifest().records.len();
    let mut out = Array2::<f64>::zeros((n, backbone.output_dim()));
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(chunk.max(1)) {
        let seqs = idx.iter().map(|&i| data.sequence(i)).collect::<Result<Vec<_>, _>>()?;
        let f = backbone.features(&seqs)?;
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).assign(&f.row(r));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- student

enum Objective<'a> {
    /// Hard labels only.
    Supervised,
    /// `α·CE + (1−α)·KL` against class logits of a classifier teacher.
    Late { teacher: &'a ModelHandle, params: DistillParams },
    /// KL only, against raw backbone outputs.
    Early { backbone: &'a Backbone, params: DistillParams },
}

struct SoftTargets<'a> {
    objective: Objective<'a>,
    cache: Option<HashMap<String, Array1<f64>>>,
}

impl SoftTargets<'_> {
    fn compute(&self, seqs: &[Arc<FrameSequence>]) -> Result<Option<Array2<f64>>, TrainError> {
        Ok(match &self.objective {
            Objective::Supervised => None,
            Objective::Late { teacher, .. } => Some(teacher.clip_logits(seqs)?.0),
            Objective::Early { backbone, .. } => Some(backbone.features(seqs)?),
        })
    }

    /// Teacher targets for a batch, memoised by clip id when caching is on.
    fn get(&mut self, seqs: &[Arc<FrameSequence>]) -> Result<Option<Array2<f64>>, TrainError> {
        let Some(cache) = &self.cache else { return self.compute(seqs) };
        let missing: Vec<Arc<FrameSequence>> =
            seqs.iter().filter(|s| !cache.contains_key(&s.clip_id)).cloned().collect();
        if !missing.is_empty() {
            if let Some(t) = self.compute(&missing)? {
                let cache = self.cache.as_mut().unwrap();
                for (s, row) in missing.iter().zip(t.axis_iter(Axis(0))) {
                    cache.insert(s.clip_id.clone(), row.to_owned());
                }
            }
        }
        let cache = self.cache.as_ref().unwrap();
        if matches!(self.objective, Objective::Supervised) {
            return Ok(None);
        }
        let width = cache.values().next().map_or(0, |r| r.len());
        let mut out = Array2::<f64>::zeros((seqs.len(), width));
        for (r, s) in seqs.iter().enumerate() {
            out.row_mut(r).assign(&cache[&s.clip_id]);
        }
        Ok(Some(out))
    }
}

struct Evaluated {
    total: f64,
    ce: f64,
    kl: f64,
    grad: Array2<f64>,
}

fn objective_loss(
    objective: &Objective,
    student: &Array2<f64>,
    soft: Option<&Array2<f64>>,
    labels: &[usize],
) -> Result<Evaluated, LossError> {
    Ok(match (objective, soft) {
        (Objective::Late { params, .. }, Some(t)) => {
            let o = distillation_loss(student.view(), t.view(), &targets(labels), params)?;
            Evaluated { total: o.total, ce: o.cross_entropy, kl: o.kl, grad: o.grad }
        }
        (Objective::Early { params, .. }, Some(t)) => {
            let o = soft_target_loss(student.view(), t.view(), params)?;
            Evaluated { total: o.total, ce: 0.0, kl: o.kl, grad: o.grad }
        }
        _ => {
            let o = cross_entropy(student.view(), &targets(labels))?;
            Evaluated { total: o.value, ce: o.value, kl: 0.0, grad: o.grad }
        }
    })
}

/// Reference labels for accuracy: ground truth, or the backbone's top
/// output in the early stage where the head predicts backbone classes.
fn reference_labels(objective: &Objective, soft: Option<&Array2<f64>>, labels: &[usize]) -> Vec<usize> {
    match (objective, soft) {
        (Objective::Early { .. }, Some(t)) => t.axis_iter(Axis(0)).map(argmax).collect(),
        _ => labels.to_vec(),
    }
}

/// Clips judged correct under the at-least-half frame rule.
fn clips_correct(frame_logits: &Array2<f64>, offsets: &[usize], reference: &[usize]) -> usize {
    offsets
        .windows(2)
        .zip(reference)
        .filter(|(w, &label)| {
            let hits = (w[0]..w[1]).filter(|&r| argmax(frame_logits.row(r)) == label).count();
            video_rule(w[1] - w[0], hits)
        })
        .count()
}

fn collect_batch(data: &Dataset, idx: &[usize]) -> Result<ClipBatch, DatasetError> {
    let sequences = idx.iter().map(|&i| data.sequence(i)).collect::<Result<Vec<_>, _>>()?;
    Ok(ClipBatch {
        record_indices: idx.to_vec(),
        labels: idx.iter().map(|&i| data.manifest().records[i].label_index).collect(),
        sequences,
    })
}

fn run_student(
    mut net: Student,
    mut soft: SoftTargets,
    data: &Dataset,
    config: &StudentTrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome, TrainError> {
    let val_idx = data.split_indices(Split::Val);
    let spec = ModelSpec::Student { student: net.spec().clone() };
    let seed = config.seed;
    let result = drive(&mut net, spec, config.optimizer.build(), seed, config.epochs, options, |net, opt, epoch| {
        let lr = config.learning_rate_at(epoch - 1);
        let mut ctx = TrainCtx::new(mix_seed(seed, 2 * epoch as u64 + 1));
        let mut sums = Sums::default();
        for (step, batch) in
            data.batches(Split::Train, config.batch_size, mix_seed(seed, 2 * epoch as u64))?.enumerate()
        {
            let batch = batch?;
            let t = soft.get(&batch.sequences)?;
            zero_grad(net);
            let fw = net.forward_train(&batch.sequences, &mut ctx)?;
            let loss = objective_loss(&soft.objective, &fw.clip_logits, t.as_ref(), &batch.labels)
                .map_err(diverged(epoch, Some(step)))?;
            if !loss.total.is_finite() {
                return Err(TrainError::Diverged { epoch, step: Some(step) });
            }
            net.backward_clip(&loss.grad, &fw.offsets);
            step_optimizer(net, opt, lr, config.grad_clip);
            let reference = reference_labels(&soft.objective, t.as_ref(), &batch.labels);
            let correct = clips_correct(&fw.frame_logits, &fw.offsets, &reference);
            sums.add(batch.len(), loss.total, loss.ce, loss.kl, correct);
        }
        let mut val = Sums::default();
        for idx in val_idx.chunks(config.batch_size) {
            let batch = collect_batch(data, idx)?;
            let t = soft.get(&batch.sequences)?;
            let (frames, offsets) = net.frame_logits(&batch.sequences)?;
            let mut clip_logits = Array2::<f64>::zeros((batch.len(), frames.ncols()));
            for (r, w) in offsets.windows(2).enumerate() {
                clip_logits
                    .row_mut(r)
                    .assign(&aggregate_clip_logits(frames.slice(ndarray::s![w[0]..w[1], ..]), Aggregation::Mean)?);
            }
            let loss = objective_loss(&soft.objective, &clip_logits, t.as_ref(), &batch.labels)
                .map_err(diverged(epoch, None))?;
            let reference = reference_labels(&soft.objective, t.as_ref(), &batch.labels);
            val.add(batch.len(), loss.total, loss.ce, loss.kl, clips_correct(&frames, &offsets, &reference));
        }
        Ok(EpochRecord {
            epoch,
            train_loss: sums.mean(sums.loss),
            train_acc: sums.acc(),
            val_loss: val.mean(val.loss),
            val_acc: val.acc(),
            lr,
            ce_part: sums.mean(sums.ce),
            kl_part: sums.mean(sums.kl),
        })
    })?;
    Ok(TrainOutcome {
        model: ModelHandle::Student(net),
        history: result.history,
        best: result.best,
        best_epoch: result.best_epoch,
        last: result.last,
    })
}

fn student_prelude(student: ModelHandle, data: &Dataset, config: &StudentTrainConfig) -> Result<Student, TrainError> {
    config.validate()?;
    let ModelHandle::Student(net) = student else {
        return Err(TrainError::WrongModel("expected a student network"));
    };
    data.manifest().require_splits()?;
    Ok(net)
}

/// Trains `student` against a frozen `teacher`. In the late stage the soft
/// targets are the teacher's class logits; in the early stage they are the
/// teacher backbone's raw outputs and hard labels are not used.
pub fn distill_student(
    student: ModelHandle,
    teacher: &ModelHandle,
    data: &Dataset,
    config: &StudentTrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome, TrainError> {
    let net = student_prelude(student, data, config)?;
    let trainable = teacher.count_parameters(true);
    if trainable > 0 {
        return Err(TrainError::TeacherNotFrozen(trainable));
    }
    let m = data.num_classes();
    let objective = match config.stage {
        DistillStage::Late => {
            let teacher_classes = match teacher {
                ModelHandle::Jointnet(j) => j.num_classes(),
                ModelHandle::Student(s) => s.num_classes(),
                ModelHandle::Backbone(_) => {
                    return Err(TrainError::WrongModel("late distillation needs a classifier teacher"))
                }
            };
            if teacher_classes != m {
                return Err(TrainError::ClassMismatch { what: "teacher head", expected: m, found: teacher_classes });
            }
            if net.num_classes() != m {
                return Err(TrainError::ClassMismatch { what: "student head", expected: m, found: net.num_classes() });
            }
            Objective::Late { teacher, params: config.distill }
        }
        DistillStage::Early => {
            let backbone = match teacher {
                ModelHandle::Jointnet(j) => j.backbone(),
                ModelHandle::Backbone(b) => b,
                ModelHandle::Student(_) => return Err(TrainError::WrongModel("early distillation needs a backbone")),
            };
            if net.num_classes() != backbone.output_dim() {
                return Err(TrainError::ClassMismatch {
                    what: "early-stage student head",
                    expected: backbone.output_dim(),
                    found: net.num_classes(),
                });
            }
            Objective::Early { backbone, params: DistillParams { alpha: 0.0, ..config.distill } }
        }
    };
    let before = teacher.checksum();
    let soft = SoftTargets { objective, cache: config.cache_teacher_logits.then(HashMap::new) };
    let outcome = run_student(net, soft, data, config, options)?;
    if teacher.checksum() != before {
        return Err(TrainError::FrozenStateChanged("teacher"));
    }
    Ok(outcome)
}

/// Trains `student` on hard labels alone; `config.distill` and
/// `config.stage` are ignored.
pub fn train_student_supervised(
    student: ModelHandle,
    data: &Dataset,
    config: &StudentTrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome, TrainError> {
    let net = student_prelude(student, data, config)?;
    if net.num_classes() != data.num_classes() {
        return Err(TrainError::ClassMismatch {
            what: "student head",
            expected: data.num_classes(),
            found: net.num_classes(),
        });
    }
    run_student(net, SoftTargets { objective: Objective::Supervised, cache: None }, data, config, options)
}
