use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frames::{count_directory_frames, probe_video_frame_count, VIDEO_EXTENSIONS};
use super::DatasetError;

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self, DatasetError> {
        if names.is_empty() {
            return Err(DatasetError::Vocabulary("no classes".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(DatasetError::Vocabulary("empty class name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(DatasetError::Vocabulary(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Number of classes, `M`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?} (expected train or val)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Storage locator as written in the manifest; relative paths resolve
    /// against the manifest's directory.
    pub path: PathBuf,
    pub label_index: usize,
    pub split: Split,
    pub frame_count: usize,
}

#[derive(Debug, Clone)]
pub struct ClipManifest {
    pub version: String,
    pub vocabulary: ClassVocabulary,
    pub records: Vec<ClipRecord>,
    root: PathBuf,
}

impl PartialEq for ClipManifest {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.vocabulary == other.vocabulary && self.records == other.records
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    version: String,
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    clip_id: String,
    path: String,
    label: String,
    split: Split,
    frame_count: usize,
}

impl ClipManifest {
    /// Builds a manifest after checking every record invariant.
    pub fn new(
        vocabulary: ClassVocabulary,
        records: Vec<ClipRecord>,
        root: impl Into<PathBuf>,
    ) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            let line = i + 2;
            if r.clip_id.is_empty() {
                return Err(DatasetError::Schema { line, message: "clip_id: must be non-empty".into() });
            }
            if !seen.insert(r.clip_id.clone()) {
                return Err(DatasetError::DuplicateClip { line, clip_id: r.clip_id.clone() });
            }
            if r.label_index >= vocabulary.len() {
                return Err(DatasetError::Schema {
                    line,
                    message: format!("label index {} out of range", r.label_index),
                });
            }
            if r.frame_count == 0 {
                return Err(DatasetError::Schema { line, message: "frame_count: must be at least 1".into() });
            }
        }
        Ok(Self { version: MANIFEST_VERSION.to_string(), vocabulary, records, root: root.into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    /// Parses line-delimited JSON: a header object followed by one record per line.
    /// Blank lines are ignored; line numbers in errors are 1-based.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let (hline, htext) = lines.next().ok_or(DatasetError::Schema { line: 1, message: "missing header".into() })?;
        let header: HeaderLine = serde_json::from_str(htext)
            .map_err(|e| DatasetError::Schema { line: hline, message: format!("header: {e}") })?;
        if header.version != MANIFEST_VERSION {
            return Err(DatasetError::UnsupportedVersion(header.version));
        }
        let vocabulary = ClassVocabulary::new(header.class_names)?;

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (line, text) in lines {
            let r: RecordLine =
                serde_json::from_str(text).map_err(|e| DatasetError::Schema { line, message: e.to_string() })?;
            if r.clip_id.is_empty() {
                return Err(DatasetError::Schema { line, message: "clip_id: must be non-empty".into() });
            }
            if r.path.is_empty() {
                return Err(DatasetError::Schema { line, message: "path: must be non-empty".into() });
            }
            if r.frame_count == 0 {
                return Err(DatasetError::Schema { line, message: "frame_count: must be at least 1".into() });
            }
            let label_index = vocabulary
                .index_of(&r.label)
                .ok_or_else(|| DatasetError::UnknownLabel { line, label: r.label.clone() })?;
            if !seen.insert(r.clip_id.clone()) {
                return Err(DatasetError::DuplicateClip { line, clip_id: r.clip_id });
            }
            records.push(ClipRecord {
                clip_id: r.clip_id,
                path: PathBuf::from(r.path),
                label_index,
                split: r.split,
                frame_count: r.frame_count,
            });
        }
        Ok(Self { version: header.version, vocabulary, records, root: root.into() })
    }

    pub fn to_jsonl(&self) -> String {
        let header = HeaderLine { version: self.version.clone(), class_names: self.vocabulary.names().to_vec() };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            let line = RecordLine {
                clip_id: r.clip_id.clone(),
                path: r.path.to_string_lossy().replace('\\', "/"),
                label: self.vocabulary.names()[r.label_index].clone(),
                split: r.split,
                frame_count: r.frame_count,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| DatasetError::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, record: &ClipRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = (usize, &ClipRecord)> {
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Errors unless both splits are populated.
    pub fn require_splits(&self) -> Result<(), DatasetError> {
        for split in [Split::Train, Split::Val] {
            if self.split_records(split).next().is_none() {
                return Err(DatasetError::EmptySplit(split));
            }
        }
        Ok(())
    }

    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.vocabulary.len()];
        for r in self.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
            counts[r.label_index] += 1;
        }
        counts
    }
}

/// Assigns `split` on every record: per class, a seeded shuffle puts
/// `round(train_fraction · n)` clips in train, clamped so that any class with
/// two or more clips keeps at least one clip in each split.
pub fn stratified_split(records: &mut [ClipRecord], train_fraction: f64, seed: u64) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label_index).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = (train_fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        } else {
            n_train = n;
        }
        for (k, &i) in members.iter().enumerate() {
            records[i].split = if k < n_train { Split::Train } else { Split::Val };
        }
    }
}

/// Builds a manifest from `src/<class>/<clip>` where each clip is a
/// directory of `frame_NNNN` images or a video file. Classes and clips are
/// taken in sorted name order; paths are stored relative to `src`.
pub fn scan_clip_tree(src: &Path, train_fraction: f64, seed: u64) -> Result<ClipManifest, DatasetError> {
    let sorted_entries = |dir: &Path| -> Result<Vec<PathBuf>, DatasetError> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| DatasetError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let class_dirs: Vec<PathBuf> = sorted_entries(src)?.into_iter().filter(|p| p.is_dir()).collect();
    let names: Vec<String> =
        class_dirs.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let vocabulary = ClassVocabulary::new(names)?;

    let mut records = Vec::new();
    for (label_index, class_dir) in class_dirs.iter().enumerate() {
        for clip in sorted_entries(class_dir)? {
            let is_video = clip
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| VIDEO_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            let frame_count = if clip.is_dir() {
                count_directory_frames(&clip)?
            } else if is_video {
                probe_video_frame_count(&clip)?
            } else {
                continue;
            };
            if frame_count == 0 {
                continue;
            }
            let rel = clip.strip_prefix(src).unwrap_or(&clip).to_path_buf();
            let stem = clip.file_stem().unwrap_or_default().to_string_lossy();
            records.push(ClipRecord {
                clip_id: format!("{}/{}", vocabulary.names()[label_index], stem),
                path: rel,
                label_index,
                split: Split::Train,
                frame_count,
            });
        }
    }
    stratified_split(&mut records, train_fraction, seed);
    ClipManifest::new(vocabulary, records, src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO: &str = r#"{"version":"1","class_names":["Kick","Run"]}
{"clip_id":"a","path":"clips/a","label":"Kick","split":"train","frame_count":25}
{"clip_id":"b","path":"clips/b","label":"Run","split":"val","frame_count":26}
"#;

    #[test]
    fn parses_minimal_manifest() {
        let m = ClipManifest::parse(TWO, "/data").unwrap();
        assert_eq!(m.vocabulary.len(), 2);
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].label_index, 1);
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/clips/a"));
    }

    #[test]
    fn duplicate_clip_id_is_named() {
        let text = TWO.replace("\"clip_id\":\"b\"", "\"clip_id\":\"a\"");
        let err = ClipManifest::parse(&text, "").unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateClip { line: 3, ref clip_id } if clip_id == "a"));
        assert!(err.to_string().contains("\"a\""));
    }

    #[test]
    fn unknown_label_and_schema_errors() {
        let text = TWO.replace("\"label\":\"Run\"", "\"label\":\"Walk\"");
        assert!(matches!(ClipManifest::parse(&text, ""), Err(DatasetError::UnknownLabel { line: 3, .. })));
        let text = TWO.replace(",\"frame_count\":26", "");
        let err = ClipManifest::parse(&text, "").unwrap_err();
        assert!(matches!(err, DatasetError::Schema { line: 3, .. }));
        assert!(err.to_string().contains("frame_count"));
        let text = TWO.replace("\"frame_count\":25", "\"frame_count\":0");
        assert!(matches!(ClipManifest::parse(&text, ""), Err(DatasetError::Schema { line: 2, .. })));
        assert!(matches!(ClipManifest::parse("", ""), Err(DatasetError::Schema { line: 1, .. })));
    }

    #[test]
    fn full_scale_manifest() {
        let names = ["Dribble", "Kick", "Run", "Walk"];
        let mut text = String::from(r#"{"version":"1","class_names":["Dribble","Kick","Run","Walk"]}"#);
        text.push('\n');
        for i in 0..448 {
            text.push_str(&format!(
                "{{\"clip_id\":\"c{i}\",\"path\":\"c{i}\",\"label\":\"{}\",\"split\":\"train\",\"frame_count\":{}}}\n",
                names[i % 4],
                25 + i % 2
            ));
        }
        let m = ClipManifest::parse(&text, "").unwrap();
        assert_eq!((m.vocabulary.len(), m.records.len()), (4, 448));
    }

    #[test]
    fn stratified_split_of_ten_clips() {
        let mut records: Vec<ClipRecord> = (0..10)
            .map(|i| ClipRecord {
                clip_id: format!("c{i}"),
                path: PathBuf::from(format!("c{i}")),
                label_index: i % 2,
                split: Split::Train,
                frame_count: 25,
            })
            .collect();
        stratified_split(&mut records, 0.8, 3);
        // enumerate per class: 5 clips each, round(4.0) = 4 train
        for class in 0..2 {
            let train = records.iter().filter(|r| r.label_index == class && r.split == Split::Train).count();
            assert_eq!(train, 4);
        }
        assert_eq!(records.iter().filter(|r| r.split == Split::Val).count(), 2);
    }

    fn arb_manifest() -> impl Strategy<Value = ClipManifest> {
        (1usize..5, prop::collection::vec((0usize..100, any::<bool>(), 1usize..40), 0..20)).prop_map(|(m, recs)| {
            let vocab = ClassVocabulary::new((0..m).map(|i| format!("class {i}")).collect()).unwrap();
            let records = recs
                .into_iter()
                .enumerate()
                .map(|(i, (label, train, fc))| ClipRecord {
                    clip_id: format!("clip-{i}"),
                    path: PathBuf::from(format!("dir/clip {i}")),
                    label_index: label % m,
                    split: if train { Split::Train } else { Split::Val },
                    frame_count: fc,
                })
                .collect();
            ClipManifest::new(vocab, records, "").unwrap()
        })
    }

    proptest! {
        #[test]
        fn write_then_load_round_trips(m in arb_manifest()) {
            let reparsed = ClipManifest::parse(&m.to_jsonl(), "").unwrap();
            prop_assert_eq!(reparsed, m);
        }
    }
}
