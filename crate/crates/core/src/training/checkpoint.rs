//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"KDACKPT\0"
//! u32     format version
//! u64     header length, then that many bytes of JSON header
//! u64     payload length, then the f64 payload
//! [u8;32] SHA-256 of every preceding byte
//! ```
//!
//! The header lists every tensor with its shape and its offset into the
//! payload (in elements), the model spec, and the training state.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::RunHistory;
use crate::models::{build_backbone, build_jointnet, build_student, ModelError, ModelHandle, ModelSpec};
use crate::nn::{AdamConfig, Optimizer, ParamTree, SgdConfig, Slot, SlotMut, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KDACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint archive")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated or malformed archive: {0}")]
    Malformed(String),
    #[error("checksum mismatch")]
    Integrity,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("optimizer state: {0}")]
    Optimizer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
    Optimizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam(AdamConfig),
    Sgd(SgdConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub kind: OptimizerKind,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl OptimizerSnapshot {
    pub fn capture(opt: &Optimizer) -> Self {
        let kind = match opt {
            Optimizer::Adam { config, .. } => OptimizerKind::Adam(*config),
            Optimizer::Sgd { config, .. } => OptimizerKind::Sgd(*config),
        };
        let tensors = opt.state_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        Self { kind, step: opt.step_count(), tensors }
    }

    pub fn restore(&self) -> Result<Optimizer, CheckpointError> {
        let mut opt = match self.kind {
            OptimizerKind::Adam(c) => Optimizer::adam(c),
            OptimizerKind::Sgd(c) => Optimizer::sgd(c),
        };
        opt.restore(self.step, self.tensors.iter().cloned()).map_err(CheckpointError::Optimizer)?;
        Ok(opt)
    }
}

/// Model state plus everything needed to continue or audit a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub config: serde_json::Value,
    pub history: RunHistory,
    pub state: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    epoch: usize,
    seed: u64,
    config: serde_json::Value,
    history: RunHistory,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    trainable: bool,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    #[serde(flatten)]
    kind: OptimizerKind,
    step: u64,
}

/// Reads every parameter and buffer of `tree`.
pub fn capture_state<T: ParamTree + ?Sized>(tree: &T) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    tree.visit_state("", &mut |name, slot| {
        let (kind, trainable, value) = match slot {
            Slot::Param(p) => (TensorKind::Param, p.trainable, p.value.clone()),
            Slot::Buffer(b) => (TensorKind::Buffer, false, b.clone()),
        };
        out.push(NamedTensor { name, kind, trainable, value });
    });
    out
}

/// Overwrites `tree`'s state; every slot must be present with a matching
/// shape and no extra tensors are allowed.
pub fn apply_state<T: ParamTree + ?Sized>(tree: &mut T, state: &[NamedTensor]) -> Result<(), ModelError> {
    let mut by_name: HashMap<&str, &NamedTensor> = HashMap::new();
    for t in state {
        if by_name.insert(&t.name, t).is_some() {
            return Err(ModelError::UnexpectedTensor(format!("{} (duplicate)", t.name)));
        }
    }
    let mut err = None;
    tree.visit_state_mut("", &mut |name, slot| {
        if err.is_some() {
            return;
        }
        let Some(src) = by_name.remove(name.as_str()) else {
            err = Some(ModelError::MissingTensor(name));
            return;
        };
        let dst = match &slot {
            SlotMut::Param(p) => p.value.shape().to_vec(),
            SlotMut::Buffer(b) => b.shape().to_vec(),
        };
        let kind_ok = matches!(
            (&slot, src.kind),
            (SlotMut::Param(_), TensorKind::Param) | (SlotMut::Buffer(_), TensorKind::Buffer)
        );
        if dst != src.value.shape() || !kind_ok {
            err = Some(ModelError::ShapeMismatch { name, expected: dst, found: src.value.shape().to_vec() });
            return;
        }
        match slot {
            SlotMut::Param(p) => {
                p.value.assign(&src.value);
                p.trainable = src.trainable;
            }
            SlotMut::Buffer(b) => b.assign(&src.value),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(ModelError::UnexpectedTensor(extra.to_string()));
    }
    Ok(())
}

/// Builds an empty model with the structure described by `spec`.
pub fn build_from_spec(spec: &ModelSpec) -> Result<ModelHandle, ModelError> {
    Ok(match spec {
        ModelSpec::Backbone { backbone } => ModelHandle::Backbone(build_backbone(backbone, 0)?),
        ModelSpec::Jointnet { backbone, adapter, frontnet } => {
            ModelHandle::Jointnet(build_jointnet(build_backbone(backbone, 0)?, adapter, frontnet, 0)?)
        }
        ModelSpec::Student { student } => ModelHandle::Student(build_student(student, 0)?),
    })
}

impl Checkpoint {
    pub fn capture<T: ParamTree + ?Sized>(
        model: ModelSpec,
        tree: &T,
        epoch: usize,
        seed: u64,
        config: serde_json::Value,
        history: RunHistory,
        optimizer: Option<&Optimizer>,
    ) -> Self {
        Self {
            model,
            epoch,
            seed,
            config,
            history,
            state: capture_state(tree),
            optimizer: optimizer.map(OptimizerSnapshot::capture),
        }
    }

    /// Snapshot of a finished model without training state.
    pub fn of_model(model: &ModelHandle) -> Self {
        Self::capture(model.spec(), model, 0, 0, serde_json::Value::Null, RunHistory::default(), None)
    }

    /// Rebuilds the model from its spec and loads the stored state, after
    /// validating every tensor name and shape.
    pub fn restore_model(&self) -> Result<ModelHandle, CheckpointError> {
        let mut model = build_from_spec(&self.model)?;
        apply_state(&mut model, &self.state)?;
        Ok(model)
    }

    pub fn restore_optimizer(&self) -> Result<Option<Optimizer>, CheckpointError> {
        self.optimizer.as_ref().map(OptimizerSnapshot::restore).transpose()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload: Vec<f64> = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: &str, kind, trainable, t: &Tensor, payload: &mut Vec<f64>| {
            entries.push(TensorEntry {
                name: name.to_string(),
                kind,
                trainable,
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                len: t.len() as u64,
            });
            payload.extend(t.iter());
        };
        for t in &self.state {
            push(&t.name, t.kind, t.trainable, &t.value, &mut payload);
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in &opt.tensors {
                push(name, TensorKind::Optimizer, false, t, &mut payload);
            }
        }
        let header = Header {
            model: self.model.clone(),
            epoch: self.epoch,
            seed: self.seed,
            config: self.config.clone(),
            history: self.history.clone(),
            tensors: entries,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader { kind: o.kind, step: o.step }),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + payload.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&((payload.len() * 8) as u64).to_le_bytes());
        for v in &payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let malformed = |m: &str| CheckpointError::Malformed(m.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = r.len_prefix()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        let payload_len = r.len_prefix()?;
        if payload_len % 8 != 0 {
            return Err(malformed("payload length is not a multiple of 8"));
        }
        let payload = r.take(payload_len)?;
        let body_end = r.pos;
        let trailer = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes after checksum"));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != trailer {
            return Err(CheckpointError::Integrity);
        }
        let values = payload.len() / 8;
        let mut expected_offset = 0u64;
        let mut state = Vec::new();
        let mut opt_tensors = Vec::new();
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(CheckpointError::Malformed(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| malformed("shape overflow"))?;
            if numel as u64 != e.len || e.offset != expected_offset {
                return Err(CheckpointError::Malformed(format!("{}: inconsistent tensor table", e.name)));
            }
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= values as u64)
                .ok_or_else(|| malformed("tensor exceeds payload"))?;
            expected_offset = end;
            let data: Vec<f64> = payload[e.offset as usize * 8..end as usize * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value =
                Tensor::from_shape_vec(e.shape, data).map_err(|err| CheckpointError::Malformed(err.to_string()))?;
            match e.kind {
                TensorKind::Optimizer => opt_tensors.push((e.name, value)),
                kind => state.push(NamedTensor { name: e.name, kind, trainable: e.trainable, value }),
            }
        }
        if expected_offset != values as u64 {
            return Err(malformed("payload holds unreferenced values"));
        }
        let optimizer = match header.optimizer {
            Some(h) => Some(OptimizerSnapshot { kind: h.kind, step: h.step, tensors: opt_tensors }),
            None if opt_tensors.is_empty() => None,
            None => return Err(malformed("optimizer tensors without optimizer header")),
        };
        Ok(Self {
            model: header.model,
            epoch: header.epoch,
            seed: header.seed,
            config: header.config,
            history: header.history,
            state,
            optimizer,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Malformed(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn len_prefix(&mut self) -> Result<usize, CheckpointError> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(n).map_err(|_| CheckpointError::Malformed("length prefix too large".into()))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint.encode()).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::decode(&bytes)
}
