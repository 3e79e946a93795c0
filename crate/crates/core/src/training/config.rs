use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::losses::DistillParams;
use crate::nn::{AdamConfig, Optimizer, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    CosineAnnealing,
    Constant,
}

/// Adam settings for the teacher head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TeacherOptimizer {
    AdaptiveMoment {
        learning_rate: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for TeacherOptimizer {
    fn default() -> Self {
        Self::AdaptiveMoment { learning_rate: 1e-4, beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }
}

impl TeacherOptimizer {
    pub fn learning_rate(&self) -> f64 {
        match self {
            Self::AdaptiveMoment { learning_rate, .. } => *learning_rate,
        }
    }

    pub fn build(&self) -> Optimizer {
        match *self {
            Self::AdaptiveMoment { beta1, beta2, eps, .. } => Optimizer::adam(AdamConfig { beta1, beta2, eps }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StudentOptimizer {
    MomentumSgd { learning_rate: f64, momentum: f64, weight_decay: f64 },
}

impl Default for StudentOptimizer {
    fn default() -> Self {
        Self::MomentumSgd { learning_rate: 1e-4, momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl StudentOptimizer {
    pub fn learning_rate(&self) -> f64 {
        match self {
            Self::MomentumSgd { learning_rate, .. } => *learning_rate,
        }
    }

    pub fn build(&self) -> Optimizer {
        match *self {
            Self::MomentumSgd { momentum, weight_decay, .. } => Optimizer::sgd(SgdConfig { momentum, weight_decay }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillStage {
    /// Soft targets are the fine-tuned teacher's class logits.
    #[default]
    Late,
    /// Soft targets are the raw backbone outputs; the student head is sized
    /// to the backbone width and no hard labels are used.
    Early,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: TeacherOptimizer,
    pub schedule: Schedule,
    pub min_learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            optimizer: TeacherOptimizer::default(),
            schedule: Schedule::CosineAnnealing,
            min_learning_rate: 0.0,
            seed: 0,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: StudentOptimizer,
    pub schedule: Schedule,
    pub min_learning_rate: f64,
    pub distill: DistillParams,
    pub stage: DistillStage,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Memoise teacher logits by clip id instead of recomputing per batch.
    pub cache_teacher_logits: bool,
}

impl Default for StudentTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            optimizer: StudentOptimizer::default(),
            schedule: Schedule::Constant,
            min_learning_rate: 0.0,
            distill: DistillParams::default(),
            stage: DistillStage::Late,
            seed: 0,
            grad_clip: None,
            cache_teacher_logits: false,
        }
    }
}

fn check_common(epochs: usize, batch_size: usize, lr: f64, min_lr: f64, clip: Option<f64>) -> Result<(), TrainError> {
    if epochs == 0 {
        return Err(TrainError::Config("epochs must be at least 1".into()));
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrainError::Config(format!("learning_rate {lr} must be positive")));
    }
    if !(0.0..=lr).contains(&min_lr) {
        return Err(TrainError::Config(format!("min_learning_rate {min_lr} must lie in [0, learning_rate]")));
    }
    if let Some(c) = clip {
        if c.is_nan() || c <= 0.0 {
            return Err(TrainError::Config(format!("grad_clip {c} must be positive")));
        }
    }
    Ok(())
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_common(
            self.epochs,
            self.batch_size,
            self.optimizer.learning_rate(),
            self.min_learning_rate,
            self.grad_clip,
        )
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        lr_at(self.schedule, epoch, self.epochs, self.optimizer.learning_rate(), self.min_learning_rate)
    }
}

impl StudentTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_common(
            self.epochs,
            self.batch_size,
            self.optimizer.learning_rate(),
            self.min_learning_rate,
            self.grad_clip,
        )?;
        let StudentOptimizer::MomentumSgd { momentum, weight_decay, .. } = self.optimizer;
        if !(0.0..1.0).contains(&momentum) {
            return Err(TrainError::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if weight_decay.is_nan() || weight_decay < 0.0 {
            return Err(TrainError::Config(format!("weight_decay {weight_decay} must be non-negative")));
        }
        self.distill.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        lr_at(self.schedule, epoch, self.epochs, self.optimizer.learning_rate(), self.min_learning_rate)
    }
}

fn lr_at(schedule: Schedule, epoch: usize, total: usize, base: f64, min: f64) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::CosineAnnealing => cosine_annealing_lr(epoch, total, base, min).expect("validated config"),
    }
}

/// `min + (base − min)·(1 + cos(π·epoch/total))/2`, a single descent.
pub fn cosine_annealing_lr(epoch: usize, total_epochs: usize, base_lr: f64, min_lr: f64) -> Result<f64, TrainError> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(TrainError::Config(format!("epoch {epoch} outside 0..={total_epochs}")));
    }
    if !(base_lr >= min_lr && min_lr >= 0.0) {
        return Err(TrainError::Config(format!("need base_lr {base_lr} >= min_lr {min_lr} >= 0")));
    }
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_annealing_lr(0, 100, 1e-4, 0.0).unwrap(), 1e-4);
        assert!((cosine_annealing_lr(100, 100, 1e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_annealing_lr(50, 100, 1e-4, 0.0).unwrap() - 5e-5).abs() < 1e-18);
        assert!(cosine_annealing_lr(101, 100, 1e-4, 0.0).is_err());
        assert!(cosine_annealing_lr(1, 100, 1e-6, 1e-4).is_err());
    }

    #[test]
    fn defaults_follow_the_recipe() {
        let t = TeacherTrainConfig::default();
        assert_eq!(
            (t.epochs, t.batch_size, t.optimizer.learning_rate(), t.schedule),
            (100, 64, 1e-4, Schedule::CosineAnnealing)
        );
        let s = StudentTrainConfig::default();
        assert_eq!((s.epochs, s.batch_size), (200, 128));
        assert_eq!(
            s.optimizer,
            StudentOptimizer::MomentumSgd { learning_rate: 1e-4, momentum: 0.9, weight_decay: 5e-4 }
        );
        assert_eq!((s.distill.alpha, s.distill.tau, s.stage), (0.9, 6.0, DistillStage::Late));
        assert!(t.validate().is_ok() && s.validate().is_ok());
    }

    proptest! {
        #[test]
        fn cosine_is_non_increasing(total in 1usize..300, base in 1e-6f64..1.0, frac in 0.0f64..1.0) {
            let min = base * frac;
            let mut prev = f64::INFINITY;
            for e in 0..=total {
                let lr = cosine_annealing_lr(e, total, base, min).unwrap();
                prop_assert!(lr <= prev + 1e-18 && lr >= min - 1e-18);
                prev = lr;
            }
        }
    }
}
