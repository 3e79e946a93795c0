use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::frames::open_source;
use super::{preprocess_clip, ClipManifest, DatasetError, FrameSequence, SamplingConfig, Split};

/// A manifest paired with its sampling config. Each clip is sampled once,
/// deterministically, and the preprocessed frames are memoised. Clones share
/// the memo.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: ClipManifest,
    sampling: SamplingConfig,
    cells: Arc<[OnceLock<Arc<FrameSequence>>]>,
}

impl Dataset {
    pub fn new(manifest: ClipManifest, sampling: SamplingConfig) -> Result<Self, DatasetError> {
        sampling.validate()?;
        let cells = (0..manifest.records.len()).map(|_| OnceLock::new()).collect();
        Ok(Self { manifest, sampling, cells })
    }

    pub fn manifest(&self) -> &ClipManifest {
        &self.manifest
    }

    pub fn sampling(&self) -> &SamplingConfig {
        &self.sampling
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.vocabulary.len()
    }

    /// Preprocessed frames for record `index`, decoding on first access.
    pub fn sequence(&self, index: usize) -> Result<Arc<FrameSequence>, DatasetError> {
        if let Some(seq) = self.cells[index].get() {
            return Ok(seq.clone());
        }
        let record = &self.manifest.records[index];
        let mut source = open_source(record, self.manifest.resolve(record));
        let seq = Arc::new(preprocess_clip(record, source.as_mut(), &self.sampling)?);
        Ok(self.cells[index].get_or_init(|| seq).clone())
    }

    /// Decodes every clip up front, spreading the work over `workers` threads.
    /// The memoised result does not depend on the worker count.
    pub fn preload(&self, workers: usize) -> Result<(), DatasetError> {
        let workers = workers.max(1);
        let n = self.cells.len();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || -> Result<(), DatasetError> {
                        for i in (w..n).step_by(workers) {
                            self.sequence(i)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("preload worker panicked"))
        })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest.split_records(split).map(|(i, _)| i).collect()
    }

    /// One epoch of batches over `split`: a seeded permutation for train,
    /// manifest order for val. The final partial batch is kept.
    pub fn batches(&self, split: Split, batch_size: usize, seed: u64) -> Result<Batches<'_>, DatasetError> {
        if batch_size == 0 {
            return Err(DatasetError::Config("batch_size must be at least 1".into()));
        }
        let mut order = self.split_indices(split);
        if order.is_empty() {
            return Err(DatasetError::EmptySplit(split));
        }
        if split == Split::Train {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Batches { dataset: self, order, batch_size, pos: 0 })
    }
}

/// Spec-shaped entry point; see [`Dataset::batches`].
pub fn make_batches(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<Batches<'_>, DatasetError> {
    dataset.batches(split, batch_size, seed)
}

#[derive(Debug, Clone)]
pub struct ClipBatch {
    pub record_indices: Vec<usize>,
    pub sequences: Vec<Arc<FrameSequence>>,
    pub labels: Vec<usize>,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn clip_ids(&self) -> impl Iterator<Item = &str> {
        self.sequences.iter().map(|s| s.clip_id.as_str())
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    /// Record indices in visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<ClipBatch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let records = &self.dataset.manifest.records;
        let result =
            indices.iter().map(|&i| self.dataset.sequence(i)).collect::<Result<Vec<_>, _>>().map(|sequences| {
                ClipBatch {
                    labels: indices.iter().map(|&i| records[i].label_index).collect(),
                    record_indices: indices,
                    sequences,
                }
            });
        Some(result)
    }
}
