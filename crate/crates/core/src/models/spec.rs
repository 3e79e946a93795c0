use serde::{Deserialize, Serialize};

use super::ModelError;

/// Output width of the pretrained temporal backbones (Kinetics-400 classes).
pub const PRETRAINED_OUTPUT_DIM: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Frozen features exported from an external pretrained video model.
    PretrainedTemporal,
    /// Small seeded convolutional stack; the in-tree test double.
    SyntheticTiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// For `pretrained-temporal`, the path of a feature-store file.
    pub identifier: String,
    pub output_dim: usize,
    pub frozen: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::SyntheticTiny,
            identifier: "tiny".into(),
            output_dim: PRETRAINED_OUTPUT_DIM,
            frozen: true,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.output_dim == 0 {
            return Err(ModelError::Spec("backbone output_dim must be positive".into()));
        }
        if self.kind == BackboneKind::PretrainedTemporal && self.output_dim != PRETRAINED_OUTPUT_DIM {
            return Err(ModelError::Spec(format!(
                "pretrained-temporal backbones emit {PRETRAINED_OUTPUT_DIM} features, not {}",
                self.output_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub layer_widths: Vec<usize>,
    pub use_batch_normalization: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self { layer_widths: vec![PRETRAINED_OUTPUT_DIM, PRETRAINED_OUTPUT_DIM], use_batch_normalization: true }
    }
}

impl AdapterSpec {
    pub fn validate(&self, backbone_dim: usize) -> Result<(), ModelError> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(ModelError::Spec("adapter needs at least two positive widths".into()));
        }
        let (first, last) = (self.layer_widths[0], *self.layer_widths.last().unwrap());
        if first != backbone_dim {
            return Err(ModelError::DimensionMismatch {
                boundary: "backbone -> adapter",
                left: backbone_dim,
                right: first,
            });
        }
        if last != backbone_dim {
            return Err(ModelError::DimensionMismatch { boundary: "adapter output", left: backbone_dim, right: last });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontNetSpec {
    /// Widths of the hidden layers; the last must be 128.
    pub hidden_widths: Vec<usize>,
    /// Number of action classes. Zero means "take it from the dataset".
    pub num_classes: usize,
    pub use_batch_normalization: bool,
}

impl Default for FrontNetSpec {
    fn default() -> Self {
        Self { hidden_widths: vec![256, 128], num_classes: 0, use_batch_normalization: true }
    }
}

impl FrontNetSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(ModelError::Spec("frontnet hidden widths must be non-empty and positive".into()));
        }
        if *self.hidden_widths.last().unwrap() != 128 {
            return Err(ModelError::Spec("frontnet hidden widths must end in 128".into()));
        }
        if self.num_classes == 0 {
            return Err(ModelError::Spec("frontnet num_classes is unresolved".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentArchitecture {
    /// Eighteen-layer residual network with four stages of basic blocks.
    #[serde(rename = "small-residual-2d")]
    SmallResidual2d,
    /// Two strided convolutions and a linear head.
    TinyConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSpec {
    pub architecture: StudentArchitecture,
    /// Zero means "take it from the dataset".
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for StudentSpec {
    fn default() -> Self {
        Self { architecture: StudentArchitecture::SmallResidual2d, num_classes: 0, dropout_rate: 0.2 }
    }
}

impl StudentSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes == 0 {
            return Err(ModelError::Spec("student num_classes is unresolved".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Spec(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelSpec {
    Backbone { backbone: BackboneSpec },
    Jointnet { backbone: BackboneSpec, adapter: AdapterSpec, frontnet: FrontNetSpec },
    Student { student: StudentSpec },
}
