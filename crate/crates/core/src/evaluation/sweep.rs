use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dataset::Dataset;
use crate::experiment::{Experiment, ExperimentConfig, ExperimentError};
use crate::models::ModelHandle;

pub const DEFAULT_SEEDS: [u64; 5] = [11, 23, 37, 53, 71];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Alpha,
    Backbone,
    Stage,
}

impl SweepAxis {
    /// Config path varied along this axis.
    pub fn config_path(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "student.train.distill.alpha",
            SweepAxis::Backbone => "teacher.backbone.identifier",
            SweepAxis::Stage => "student.train.stage",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "backbone" => Ok(Self::Backbone),
            "stage" => Ok(Self::Stage),
            other => Err(format!("unknown sweep axis {other:?} (expected alpha, backbone or stage)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub mean_accuracy: f64,
    pub run_accuracies: Vec<f64>,
    pub teacher_accuracies: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub config_path: String,
    pub metric: String,
    pub rows: Vec<SweepRow>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs teacher training and distillation for every (setting, seed) pair
/// and averages the student accuracy per setting. A trained teacher is
/// reused across settings that leave the teacher config unchanged.
pub fn run_sweep(
    base: &ExperimentConfig,
    data: &Dataset,
    axis: SweepAxis,
    settings: &[String],
    run_count: usize,
    seeds: &[u64],
) -> Result<SweepResult, EvalError> {
    if settings.is_empty() {
        return Err(EvalError::InvalidArgument("sweep needs at least one setting".into()));
    }
    if run_count == 0 || seeds.len() != run_count {
        return Err(EvalError::InvalidArgument(format!("{} seeds given for run_count {run_count}", seeds.len())));
    }
    let mut teachers: HashMap<(String, u64), (ModelHandle, f64)> = HashMap::new();
    let mut rows = Vec::with_capacity(settings.len());
    for setting in settings {
        let context = |seed: u64| {
            let setting = setting.clone();
            move |e: ExperimentError| EvalError::Run { setting, seed, source: Box::new(e) }
        };
        let configured = base.with_override(axis.config_path(), setting).map_err(context(seeds[0]))?;
        let mut run_accuracies = Vec::with_capacity(run_count);
        let mut teacher_accuracies = Vec::with_capacity(run_count);
        for &seed in seeds {
            let config = configured.with_seed(seed);
            let key = (config.teacher_hash8(), seed);
            let exp = Experiment::with_dataset(config, data.clone());
            if !teachers.contains_key(&key) {
                log::info!("sweep {setting}: training teacher for seed {seed}");
                let outcome = exp.train_teacher(None, None).map_err(context(seed))?;
                let best = outcome.best.as_ref().unwrap_or(&outcome.last);
                let model = best.restore_model().map_err(|e| context(seed)(e.into()))?;
                let acc = super::evaluate_model(&model, data, crate::dataset::Split::Val)?.video_top1;
                teachers.insert(key.clone(), (model, acc));
            }
            let (teacher, teacher_acc) = teachers.remove(&key).expect("inserted above");
            log::info!("sweep {setting}: distilling student for seed {seed}");
            let (outcome, teacher) = exp.distill(teacher, None, None).map_err(context(seed))?;
            let (acc, _) = exp.student_accuracy(&outcome).map_err(context(seed))?;
            run_accuracies.push(acc);
            teacher_accuracies.push(teacher_acc);
            teachers.insert(key, (teacher, teacher_acc));
        }
        rows.push(SweepRow {
            setting: setting.clone(),
            mean_accuracy: mean(&run_accuracies),
            run_accuracies,
            teacher_accuracies,
            seeds: seeds.to_vec(),
        });
    }
    Ok(SweepResult {
        axis,
        config_path: axis.config_path().to_string(),
        metric: "student video top-1 on the val split".into(),
        rows,
    })
}

/// Output directory for a sweep, addressed by everything that shapes its result.
pub fn sweep_dir(base: &ExperimentConfig, axis: SweepAxis, settings: &[String], seeds: &[u64]) -> std::path::PathBuf {
    let key = serde_json::to_vec(&(base, axis, settings, seeds)).expect("sweep key serializes");
    let hash = crate::util::hex_digest(&key);
    base.output_dir.join(format!(
        "{}-sweep-{}-{}",
        base.name,
        serde_json::to_value(axis).unwrap().as_str().unwrap(),
        &hash[..8]
    ))
}

impl SweepResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Format(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "axis: {} ({})", self.config_path, self.metric);
        let _ = writeln!(s, "{:<24} {:>8} {:>8}  runs", "setting", "mean", "teacher");
        for r in &self.rows {
            let runs: Vec<String> = r.seeds.iter().zip(&r.run_accuracies).map(|(s, a)| format!("{s}:{a:.4}")).collect();
            let _ = writeln!(
                s,
                "{:<24} {:>8.4} {:>8.4}  {}",
                r.setting,
                r.mean_accuracy,
                mean(&r.teacher_accuracies),
                runs.join(" ")
            );
        }
        s
    }
}
