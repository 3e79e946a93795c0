//! Teacher jointnet (frozen backbone → adapter → FrontNet), student
//! classifiers, and the synthetic backbone used as a test double.

mod features;
mod spec;

pub use features::{FeatureStore, FEATURE_STORE_VERSION};
pub use spec::{
    AdapterSpec, BackboneKind, BackboneSpec, FrontNetSpec, ModelSpec, StudentArchitecture, StudentSpec,
    PRETRAINED_OUTPUT_DIM,
};

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FrameSequence;
use crate::nn::{
    set_trainable, BatchNorm, Conv2d, Dropout, GlobalAvgPool, Layer, Linear, MaxPool2d, ParamTree, Relu, ResidualBlock,
    Sequential, Slot, SlotMut, Tensor, TrainCtx,
};
use crate::util::hex_digest;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("dimension mismatch at {boundary}: {left} vs {right}")]
    DimensionMismatch { boundary: &'static str, left: usize, right: usize },
    #[error("backbone weights unavailable: {0}")]
    UnknownIdentifier(String),
    #[error("corrupt backbone weights: {0}")]
    Weights(String),
    #[error("no backbone features for clip {0:?}")]
    MissingFeatures(String),
    #[error("state tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("state tensor {0} missing")]
    MissingTensor(String),
    #[error("unexpected state tensor {0}")]
    UnexpectedTensor(String),
    #[error("empty input")]
    EmptyInput,
    #[error("frames in a batch must share one spatial size")]
    RaggedFrames,
}

/// Pre-softmax class scores, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits(pub Array2<f64>);

impl ClassLogits {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }
}

/// Stacks the frames of several clips into one `N × 3 × H × W` tensor.
/// `offsets[i]..offsets[i + 1]` are the rows belonging to clip `i`.
pub fn frames_to_input(clips: &[Arc<FrameSequence>]) -> Result<(Tensor, Vec<usize>), ModelError> {
    let total: usize = clips.iter().map(|c| c.len()).sum();
    if total == 0 {
        return Err(ModelError::EmptyInput);
    }
    let (h, w) = clips.iter().find(|c| !c.is_empty()).unwrap().spatial();
    let mut x = Array4::<f64>::zeros((total, 3, h, w));
    let mut offsets = vec![0];
    let mut row = 0;
    for clip in clips {
        if clip.spatial() != (h, w) && !clip.is_empty() {
            return Err(ModelError::RaggedFrames);
        }
        for frame in clip.frames.axis_iter(Axis(0)) {
            let mut dst = x.index_axis_mut(Axis(0), row);
            for ((y, xx, c), &v) in frame.indexed_iter() {
                dst[[c, y, xx]] = v as f64;
            }
            row += 1;
        }
        offsets.push(row);
    }
    Ok((x.into_dyn(), offsets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
}

/// Collapses per-frame logits `T × M` into one clip-level row.
pub fn aggregate_clip_logits(per_frame: ArrayView2<f64>, method: Aggregation) -> Result<Array1<f64>, ModelError> {
    if per_frame.nrows() == 0 {
        return Err(ModelError::EmptyInput);
    }
    match method {
        Aggregation::Mean => Ok(per_frame.mean_axis(Axis(0)).expect("non-empty")),
    }
}

fn segment_means(rows: &Array2<f64>, offsets: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((offsets.len() - 1, rows.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        let seg = rows.slice(ndarray::s![w[0]..w[1], ..]);
        out.row_mut(i).assign(&aggregate_clip_logits(seg, Aggregation::Mean).expect("clips hold at least one frame"));
    }
    out
}

fn to_matrix(t: Tensor) -> Array2<f64> {
    t.into_dimensionality::<Ix2>().expect("classifier output is 2-D")
}

// ---------------------------------------------------------------- backbone

// one backbone per model, so the size gap between variants is irrelevant
#[allow(clippy::large_enum_variant)]
#[derive(Debug)]
pub enum Backbone {
    SyntheticTiny { spec: BackboneSpec, frame_net: Sequential, projection: Linear },
    Pretrained { spec: BackboneSpec, store: FeatureStore },
}

pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Backbone, ModelError> {
    spec.validate()?;
    let mut backbone = match spec.kind {
        BackboneKind::SyntheticTiny => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut frame_net = Sequential::new();
            frame_net.push(Conv2d::new(3, 8, 3, 2, 1, true, &mut rng));
            frame_net.push(BatchNorm::new(8));
            frame_net.push(Relu::new());
            frame_net.push(Conv2d::new(8, 16, 3, 2, 1, true, &mut rng));
            frame_net.push(BatchNorm::new(16));
            frame_net.push(Relu::new());
            frame_net.push(GlobalAvgPool::new());
            let projection = Linear::new(16, spec.output_dim, &mut rng);
            Backbone::SyntheticTiny { spec: spec.clone(), frame_net, projection }
        }
        BackboneKind::PretrainedTemporal => {
            let store = FeatureStore::load(Path::new(&spec.identifier))?;
            if store.output_dim != spec.output_dim {
                return Err(ModelError::Weights(format!(
                    "{} holds {}-dim features, spec expects {}",
                    spec.identifier, store.output_dim, spec.output_dim
                )));
            }
            Backbone::Pretrained { spec: spec.clone(), store }
        }
    };
    set_trainable(&mut backbone, !spec.frozen);
    Ok(backbone)
}

impl Backbone {
    pub fn spec(&self) -> &BackboneSpec {
        match self {
            Backbone::SyntheticTiny { spec, .. } | Backbone::Pretrained { spec, .. } => spec,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.spec().output_dim
    }

    /// Clip-level backbone outputs, `B × output_dim`. Always evaluation mode.
    pub fn features(&self, clips: &[Arc<FrameSequence>]) -> Result<Array2<f64>, ModelError> {
        if clips.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        match self {
            Backbone::SyntheticTiny { frame_net, projection, .. } => {
                let (x, offsets) = frames_to_input(clips)?;
                let per_frame = to_matrix(frame_net.infer(&x));
                let pooled = segment_means(&per_frame, &offsets);
                Ok(to_matrix(projection.infer(&pooled.into_dyn())))
            }
            Backbone::Pretrained { store, spec } => {
                let mut out = Array2::<f64>::zeros((clips.len(), spec.output_dim));
                for (i, clip) in clips.iter().enumerate() {
                    let row =
                        store.get(&clip.clip_id).ok_or_else(|| ModelError::MissingFeatures(clip.clip_id.clone()))?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(row));
                }
                Ok(out)
            }
        }
    }

    /// Parameters of an external model that are not materialised here.
    pub fn declared_parameters(&self) -> u64 {
        match self {
            Backbone::Pretrained { store, .. } => store.declared_parameters,
            Backbone::SyntheticTiny { .. } => 0,
        }
    }
}

impl ParamTree for Backbone {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        if let Backbone::SyntheticTiny { frame_net, projection, .. } = self {
            frame_net.visit(&crate::nn::join(prefix, "frames"), f);
            projection.visit(&crate::nn::join(prefix, "projection"), f);
        }
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        if let Backbone::SyntheticTiny { frame_net, projection, .. } = self {
            frame_net.visit_mut(&crate::nn::join(prefix, "frames"), f);
            projection.visit_mut(&crate::nn::join(prefix, "projection"), f);
        }
    }
}

// ---------------------------------------------------------------- jointnet

/// Intermediate activations of the teacher, exposed for compositional tests.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub features: Array2<f64>,
    pub adapted: Array2<f64>,
    pub logits: ClassLogits,
}

#[derive(Debug)]
pub struct Jointnet {
    backbone: Backbone,
    adapter: Sequential,
    frontnet: Sequential,
    adapter_spec: AdapterSpec,
    frontnet_spec: FrontNetSpec,
}

fn dense_stack(widths: &[usize], batch_norm: bool, final_activation: bool, rng: &mut ChaCha8Rng) -> Sequential {
    let mut seq = Sequential::new();
    let maps = widths.len() - 1;
    for (i, w) in widths.windows(2).enumerate() {
        seq.push(Linear::new(w[0], w[1], rng));
        if i + 1 < maps || final_activation {
            if batch_norm {
                seq.push(BatchNorm::new(w[1]));
            }
            seq.push(Relu::new());
        }
    }
    seq
}

/// Composes a frozen backbone with a learnable adapter and FrontNet head.
pub fn build_jointnet(
    backbone: Backbone,
    adapter: &AdapterSpec,
    frontnet: &FrontNetSpec,
    seed: u64,
) -> Result<Jointnet, ModelError> {
    if !backbone.spec().frozen {
        return Err(ModelError::Spec("jointnet requires a frozen backbone".into()));
    }
    adapter.validate(backbone.output_dim())?;
    frontnet.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapter_net = dense_stack(&adapter.layer_widths, adapter.use_batch_normalization, true, &mut rng);
    let mut widths = vec![*adapter.layer_widths.last().unwrap()];
    widths.extend_from_slice(&frontnet.hidden_widths);
    widths.push(frontnet.num_classes);
    let frontnet_net = dense_stack(&widths, frontnet.use_batch_normalization, false, &mut rng);
    Ok(Jointnet {
        backbone,
        adapter: adapter_net,
        frontnet: frontnet_net,
        adapter_spec: adapter.clone(),
        frontnet_spec: frontnet.clone(),
    })
}

impl Jointnet {
    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn num_classes(&self) -> usize {
        self.frontnet_spec.num_classes
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Jointnet {
            backbone: self.backbone.spec().clone(),
            adapter: self.adapter_spec.clone(),
            frontnet: self.frontnet_spec.clone(),
        }
    }

    pub fn stage_outputs(&self, clips: &[Arc<FrameSequence>]) -> Result<StageOutputs, ModelError> {
        let features = self.backbone.features(clips)?;
        let adapted = to_matrix(self.adapter.infer(&features.clone().into_dyn()));
        let logits = to_matrix(self.frontnet.infer(&adapted.clone().into_dyn()));
        Ok(StageOutputs { features, adapted, logits: ClassLogits(logits) })
    }

    pub fn infer(&self, clips: &[Arc<FrameSequence>]) -> Result<ClassLogits, ModelError> {
        Ok(self.stage_outputs(clips)?.logits)
    }

    /// Evaluation-mode adapter + FrontNet on precomputed backbone features.
    pub fn head_infer(&self, features: &Array2<f64>) -> Array2<f64> {
        to_matrix(self.frontnet.infer(&self.adapter.infer(&features.clone().into_dyn())))
    }

    /// Training-mode adapter + FrontNet; the backbone stays in evaluation mode.
    pub fn head_forward(&mut self, features: &Array2<f64>, ctx: &mut TrainCtx) -> Array2<f64> {
        let adapted = self.adapter.forward(&features.clone().into_dyn(), ctx);
        to_matrix(self.frontnet.forward(&adapted, ctx))
    }

    /// Backpropagates logit gradients through FrontNet and adapter only.
    pub fn head_backward(&mut self, grad_logits: &Array2<f64>) {
        let g = self.frontnet.backward(&grad_logits.clone().into_dyn());
        self.adapter.backward(&g);
    }

    pub fn backbone_checksum(&self) -> String {
        state_checksum(&self.backbone)
    }
}

impl ParamTree for Jointnet {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.backbone.visit_state(&crate::nn::join(prefix, "backbone"), f);
        self.adapter.visit(&crate::nn::join(prefix, "adapter"), f);
        self.frontnet.visit(&crate::nn::join(prefix, "frontnet"), f);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        self.backbone.visit_state_mut(&crate::nn::join(prefix, "backbone"), f);
        self.adapter.visit_mut(&crate::nn::join(prefix, "adapter"), f);
        self.frontnet.visit_mut(&crate::nn::join(prefix, "frontnet"), f);
    }
}

// ---------------------------------------------------------------- student

/// Per-frame 2-D classifier; clip predictions average frame logits.
#[derive(Debug)]
pub struct Student {
    spec: StudentSpec,
    net: Sequential,
}

pub fn build_student(spec: &StudentSpec, seed: u64) -> Result<Student, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Sequential::new();
    let features = match spec.architecture {
        StudentArchitecture::TinyConv => {
            net.push(Conv2d::new(3, 16, 3, 2, 1, true, &mut rng));
            net.push(BatchNorm::new(16));
            net.push(Relu::new());
            net.push(Conv2d::new(16, 32, 3, 2, 1, true, &mut rng));
            net.push(BatchNorm::new(32));
            net.push(Relu::new());
            32
        }
        StudentArchitecture::SmallResidual2d => {
            net.push(Conv2d::new(3, 64, 7, 2, 3, false, &mut rng));
            net.push(BatchNorm::new(64));
            net.push(Relu::new());
            net.push(MaxPool2d::new(3, 2, 1));
            let mut in_ch = 64;
            for (stage, out_ch) in [64, 128, 256, 512].into_iter().enumerate() {
                let stride = if stage == 0 { 1 } else { 2 };
                net.push(ResidualBlock::new(in_ch, out_ch, stride, &mut rng));
                net.push(ResidualBlock::new(out_ch, out_ch, 1, &mut rng));
                in_ch = out_ch;
            }
            512
        }
    };
    net.push(GlobalAvgPool::new());
    net.push(Dropout::new(spec.dropout_rate));
    net.push(Linear::new(features, spec.num_classes, &mut rng));
    Ok(Student { spec: spec.clone(), net })
}

/// Output of a training-mode student pass.
pub struct StudentForward {
    pub clip_logits: Array2<f64>,
    pub frame_logits: Array2<f64>,
    pub offsets: Vec<usize>,
}

impl Student {
    pub fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Evaluation-mode logits for every frame, plus clip offsets.
    pub fn frame_logits(&self, clips: &[Arc<FrameSequence>]) -> Result<(Array2<f64>, Vec<usize>), ModelError> {
        let (x, offsets) = frames_to_input(clips)?;
        Ok((to_matrix(self.net.infer(&x)), offsets))
    }

    pub fn infer(&self, clips: &[Arc<FrameSequence>]) -> Result<ClassLogits, ModelError> {
        let (frames, offsets) = self.frame_logits(clips)?;
        Ok(ClassLogits(segment_means(&frames, &offsets)))
    }

    pub fn forward_train(
        &mut self,
        clips: &[Arc<FrameSequence>],
        ctx: &mut TrainCtx,
    ) -> Result<StudentForward, ModelError> {
        let (x, offsets) = frames_to_input(clips)?;
        let frame_logits = to_matrix(self.net.forward(&x, ctx));
        let clip_logits = segment_means(&frame_logits, &offsets);
        Ok(StudentForward { clip_logits, frame_logits, offsets })
    }

    /// Backpropagates clip-logit gradients through the mean aggregation.
    pub fn backward_clip(&mut self, grad_clip: &Array2<f64>, offsets: &[usize]) {
        let total = *offsets.last().unwrap();
        let mut g = Array2::<f64>::zeros((total, grad_clip.ncols()));
        for (i, w) in offsets.windows(2).enumerate() {
            let share = grad_clip.row(i).mapv(|v| v / (w[1] - w[0]) as f64);
            for r in w[0]..w[1] {
                g.row_mut(r).assign(&share);
            }
        }
        self.net.backward(&g.into_dyn());
    }
}

impl ParamTree for Student {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.net.visit(&crate::nn::join(prefix, "net"), f);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        self.net.visit_mut(&crate::nn::join(prefix, "net"), f);
    }
}

// ---------------------------------------------------------------- handle

#[derive(Debug)]
pub enum ModelHandle {
    Backbone(Backbone),
    Jointnet(Jointnet),
    Student(Student),
}

impl ModelHandle {
    pub fn spec(&self) -> ModelSpec {
        match self {
            ModelHandle::Backbone(b) => ModelSpec::Backbone { backbone: b.spec().clone() },
            ModelHandle::Jointnet(j) => j.spec(),
            ModelHandle::Student(s) => ModelSpec::Student { student: s.spec.clone() },
        }
    }

    /// Clip-level outputs; for a bare backbone these are its raw features.
    pub fn clip_logits(&self, clips: &[Arc<FrameSequence>]) -> Result<ClassLogits, ModelError> {
        match self {
            ModelHandle::Backbone(b) => Ok(ClassLogits(b.features(clips)?)),
            ModelHandle::Jointnet(j) => j.infer(clips),
            ModelHandle::Student(s) => s.infer(clips),
        }
    }

    pub fn count_parameters(&self, trainable_only: bool) -> u64 {
        let declared = match self {
            ModelHandle::Backbone(b) => b.declared_parameters(),
            ModelHandle::Jointnet(j) => j.backbone.declared_parameters(),
            ModelHandle::Student(_) => 0,
        };
        count_parameters(self, trainable_only) + if trainable_only { 0 } else { declared }
    }

    pub fn checksum(&self) -> String {
        state_checksum(self)
    }

    pub fn as_student(&self) -> Option<&Student> {
        match self {
            ModelHandle::Student(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_jointnet(&self) -> Option<&Jointnet> {
        match self {
            ModelHandle::Jointnet(j) => Some(j),
            _ => None,
        }
    }
}

impl ParamTree for ModelHandle {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        match self {
            ModelHandle::Backbone(b) => b.visit_state(prefix, f),
            ModelHandle::Jointnet(j) => j.visit_state(prefix, f),
            ModelHandle::Student(s) => s.visit_state(prefix, f),
        }
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_>)) {
        match self {
            ModelHandle::Backbone(b) => b.visit_state_mut(prefix, f),
            ModelHandle::Jointnet(j) => j.visit_state_mut(prefix, f),
            ModelHandle::Student(s) => s.visit_state_mut(prefix, f),
        }
    }
}

/// Exact number of scalar parameters materialised in `tree` (buffers excluded).
pub fn count_parameters<T: ParamTree + ?Sized>(tree: &T, trainable_only: bool) -> u64 {
    let mut n = 0u64;
    tree.visit_state("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            if p.trainable || !trainable_only {
                n += p.value.len() as u64;
            }
        }
    });
    n
}

/// SHA-256 over every parameter and buffer name and bit pattern.
pub fn state_checksum<T: ParamTree + ?Sized>(tree: &T) -> String {
    let mut bytes = Vec::new();
    tree.visit_state("", &mut |name, slot| {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        for v in slot.tensor().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    hex_digest(&bytes)
}

/// Evaluation-mode clip predictions from a bare backbone via a fixed mapping
/// from each target class to a set of backbone output indices; the class
/// whose best mapped output scores highest wins (ties to the lower class).
pub fn zero_shot_predict(
    backbone: &Backbone,
    clips: &[Arc<FrameSequence>],
    class_to_outputs: &[Vec<usize>],
) -> Result<Vec<usize>, ModelError> {
    if class_to_outputs.is_empty() || class_to_outputs.iter().any(Vec::is_empty) {
        return Err(ModelError::Spec("every class needs at least one mapped backbone output".into()));
    }
    if let Some(&bad) = class_to_outputs.iter().flatten().find(|&&o| o >= backbone.output_dim()) {
        return Err(ModelError::DimensionMismatch {
            boundary: "zero-shot mapping",
            left: backbone.output_dim(),
            right: bad,
        });
    }
    let feats = backbone.features(clips)?;
    Ok(feats
        .axis_iter(Axis(0))
        .map(|row| {
            let scores: Vec<f64> = class_to_outputs
                .iter()
                .map(|outs| outs.iter().map(|&o| row[o]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut best = 0;
            for (c, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
