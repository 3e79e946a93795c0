#![allow(dead_code)]

use std::path::Path;

use kdaction::dataset::{make_synthetic_fixture, Dataset, FixtureSpec, SamplingConfig};
use kdaction::experiment::ExperimentConfig;
use kdaction::models::{StudentArchitecture, StudentSpec};
use kdaction::training::{StudentOptimizer, TeacherOptimizer};

/// 4 classes × 2 clips × 25 frames at 32×32.
pub fn fixture(dir: &Path) -> Dataset {
    let manifest = make_synthetic_fixture(dir, &FixtureSpec::new(4, 2, 25, 32, 7)).unwrap();
    Dataset::new(manifest, fixture_sampling()).unwrap()
}

pub fn fixture_sampling() -> SamplingConfig {
    SamplingConfig { crop_size: 32, ..SamplingConfig::default() }
}

/// The default recipe shortened for the fixture, with learning rates tuned
/// to it: 30 teacher epochs and 50 student epochs on a tiny student.
pub fn fixture_config(manifest: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::with_manifest(manifest);
    c.dataset.sampling = fixture_sampling();
    c.teacher.train.epochs = 30;
    c.teacher.train.optimizer =
        TeacherOptimizer::AdaptiveMoment { learning_rate: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    c.student.model = StudentSpec { architecture: StudentArchitecture::TinyConv, num_classes: 0, dropout_rate: 0.2 };
    c.student.train.epochs = 50;
    c.student.train.optimizer =
        StudentOptimizer::MomentumSgd { learning_rate: 0.05, momentum: 0.9, weight_decay: 5e-4 };
    c
}
