use serde::{Deserialize, Serialize};

/// Metrics of one completed epoch. `epoch` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub ce_part: f64,
    pub kl_part: f64,
}

impl EpochRecord {
    pub fn is_finite(&self) -> bool {
        [self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.lr, self.ce_part, self.kl_part]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Highest val accuracy, then lowest val loss, then earliest epoch.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if !better(r, b) => Some(b),
            _ => Some(r),
        })
    }
}

/// Whether `a` should replace `b` as the best epoch.
pub(crate) fn better(a: &EpochRecord, b: &EpochRecord) -> bool {
    a.val_acc > b.val_acc
        || (a.val_acc == b.val_acc && (a.val_loss < b.val_loss || (a.val_loss == b.val_loss && a.epoch < b.epoch)))
}
