//! Experiment configuration (TOML) and the teacher → student pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClipManifest, Dataset, DatasetError, SamplingConfig, Split};
use crate::evaluation::{evaluate_model, EvalError, EvalReport, DEFAULT_SEEDS};
use crate::models::{
    build_backbone, build_jointnet, build_student, AdapterSpec, BackboneSpec, FrontNetSpec, ModelError, ModelHandle,
    StudentSpec,
};
use crate::training::{
    distill_student, freeze, train_teacher, CheckpointError, DistillStage, RunOptions, StudentTrainConfig,
    TeacherTrainConfig, TrainError, TrainOutcome,
};
use crate::util::{hex_digest, mix_seed, stable_hash};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: PathBuf,
    #[serde(default)]
    pub sampling: SamplingConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub backbone: BackboneSpec,
    pub adapter: AdapterSpec,
    pub frontnet: FrontNetSpec,
    pub train: TeacherTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub model: StudentSpec,
    pub train: StudentTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub run_count: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { run_count: DEFAULT_SEEDS.len(), seeds: DEFAULT_SEEDS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_name() -> String {
    "run".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Splits `a.b.c=value` into its path and raw value.
pub fn parse_override(arg: &str) -> Result<(String, String), ExperimentError> {
    let (path, value) =
        arg.split_once('=').ok_or_else(|| ExperimentError::Config(format!("override {arg:?} is not key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ExperimentError::Config(format!("override {arg:?} has an empty key segment")));
    }
    Ok((path.to_string(), value.trim().to_string()))
}

/// Interprets `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Expands shorthand override paths: `student.distill.*` and
/// `student.stage` live under `student.train`.
pub fn canonical_path(path: &str) -> String {
    match path.strip_prefix("student.") {
        Some(rest) if rest == "stage" || rest.starts_with("distill.") || rest == "distill" => {
            format!("student.train.{rest}")
        }
        _ => path.to_string(),
    }
}

/// Sets one dotted path inside a TOML document, creating tables as needed.
pub fn set_dotted(doc: &mut toml::Table, path: &str, raw: &str) -> Result<(), ExperimentError> {
    let path = canonical_path(path);
    let path = path.as_str();
    let mut keys: Vec<&str> = path.split('.').collect();
    let leaf = keys.pop().expect("split yields at least one item");
    let mut table = doc;
    for key in keys {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config(format!("override {path}: {key} is not a table")))?;
    }
    table.insert(leaf.to_string(), parse_value(raw));
    Ok(())
}

impl ExperimentConfig {
    /// A config with every default filled in, pointing at `manifest`.
    pub fn with_manifest(manifest: impl Into<PathBuf>) -> Self {
        Self {
            name: default_name(),
            output_dir: default_output_dir(),
            dataset: DatasetSection { manifest: manifest.into(), sampling: SamplingConfig::default() },
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        for (path, raw) in overrides {
            set_dotted(&mut doc, path, raw)?;
        }
        let config: Self =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Returns a copy with one dotted path replaced.
    pub fn with_override(&self, path: &str, raw: &str) -> Result<Self, ExperimentError> {
        Self::parse(&self.to_toml(), &[(path.to_string(), raw.to_string())])
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ExperimentError::Config(format!("name {:?} must be a plain non-empty file name", self.name)));
        }
        self.dataset.sampling.validate()?;
        self.teacher.train.validate()?;
        self.student.train.validate()?;
        if self.eval.run_count == 0 || self.eval.seeds.len() != self.eval.run_count {
            return Err(ExperimentError::Config(format!(
                "eval.seeds has {} entries but eval.run_count is {}",
                self.eval.seeds.len(),
                self.eval.run_count
            )));
        }
        Ok(())
    }

    /// Short digest of the resolved config.
    pub fn hash8(&self) -> String {
        digest8(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Digest of the parts that determine the teacher: dataset and teacher
    /// sections.
    pub fn teacher_hash8(&self) -> String {
        digest8(&serde_json::to_vec(&(&self.dataset, &self.teacher)).expect("config serializes"))
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.output_dir.join(format!("{}-teacher-{}", self.name, self.teacher_hash8()))
    }

    pub fn student_dir(&self) -> PathBuf {
        self.output_dir.join(format!("{}-student-{}", self.name, self.hash8()))
    }

    /// Sets the training seed of both phases.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.teacher.train.seed = seed;
        c.student.train.seed = seed;
        c
    }
}

fn digest8(bytes: &[u8]) -> String {
    hex_digest(bytes)[..8].to_string()
}

/// A config with its dataset opened.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: Dataset,
}

const TEACHER_INIT: u64 = 0x7465_6163;
const STUDENT_INIT: u64 = 0x7374_7564;

impl Experiment {
    pub fn open(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        let manifest = ClipManifest::load(&config.dataset.manifest)?;
        let data = Dataset::new(manifest, config.dataset.sampling.clone())?;
        Ok(Self { config, data })
    }

    pub fn with_dataset(config: ExperimentConfig, data: Dataset) -> Self {
        Self { config, data }
    }

    fn resolve_classes(declared: usize, expected: usize, what: &str) -> Result<usize, ExperimentError> {
        match declared {
            0 => Ok(expected),
            n if n == expected => Ok(n),
            n => Err(ExperimentError::Config(format!("{what} declares {n} classes, expected {expected}"))),
        }
    }

    /// Untrained jointnet. The backbone initialisation depends only on its
    /// identifier, like a fixed set of pretrained weights.
    pub fn build_teacher(&self) -> Result<ModelHandle, ExperimentError> {
        let t = &self.config.teacher;
        let mut frontnet = t.frontnet.clone();
        frontnet.num_classes =
            Self::resolve_classes(frontnet.num_classes, self.data.num_classes(), "teacher.frontnet")?;
        let backbone = build_backbone(&t.backbone, stable_hash(t.backbone.identifier.as_bytes()))?;
        Ok(ModelHandle::Jointnet(build_jointnet(
            backbone,
            &t.adapter,
            &frontnet,
            mix_seed(t.train.seed, TEACHER_INIT),
        )?))
    }

    /// Untrained student; in the early stage its head is sized to the
    /// backbone width.
    pub fn build_student(&self) -> Result<ModelHandle, ExperimentError> {
        let s = &self.config.student;
        let mut spec = s.model.clone();
        let expected = match s.train.stage {
            DistillStage::Late => self.data.num_classes(),
            DistillStage::Early => self.config.teacher.backbone.output_dim,
        };
        spec.num_classes = Self::resolve_classes(spec.num_classes, expected, "student.model")?;
        Ok(ModelHandle::Student(build_student(&spec, mix_seed(s.train.seed, STUDENT_INIT))?))
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    pub fn train_teacher(
        &self,
        checkpoint_dir: Option<PathBuf>,
        resume: Option<crate::training::Checkpoint>,
    ) -> Result<TrainOutcome, ExperimentError> {
        let options = RunOptions { checkpoint_dir, resume, stop_after: None, config_snapshot: self.snapshot() };
        Ok(train_teacher(self.build_teacher()?, &self.data, &self.config.teacher.train, &options)?)
    }

    /// Distills into a fresh student; the teacher is frozen first.
    pub fn distill(
        &self,
        mut teacher: ModelHandle,
        checkpoint_dir: Option<PathBuf>,
        resume: Option<crate::training::Checkpoint>,
    ) -> Result<(TrainOutcome, ModelHandle), ExperimentError> {
        freeze(&mut teacher);
        let options = RunOptions { checkpoint_dir, resume, stop_after: None, config_snapshot: self.snapshot() };
        let outcome =
            distill_student(self.build_student()?, &teacher, &self.data, &self.config.student.train, &options)?;
        Ok((outcome, teacher))
    }

    /// Headline accuracy of a distilled student: video top-1 on the val
    /// split of its best checkpoint, or for the early stage (whose head
    /// predicts backbone classes) the best epoch's agreement with the backbone.
    pub fn student_accuracy(&self, outcome: &TrainOutcome) -> Result<(f64, Option<EvalReport>), ExperimentError> {
        match self.config.student.train.stage {
            DistillStage::Late => {
                let best = outcome.best.as_ref().unwrap_or(&outcome.last);
                let model = best.restore_model()?;
                let report = evaluate_model(&model, &self.data, Split::Val)?;
                Ok((report.video_top1, Some(report)))
            }
            DistillStage::Early => Ok((outcome.history.best().map_or(0.0, |r| r.val_acc), None)),
        }
    }
}
