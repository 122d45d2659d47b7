//! Soft-target bookkeeping for PS-KD and DLB.

use super::SoftTargets;
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreLevel {
    /// Writes become visible after [`PastPredictions::end_epoch`].
    Epoch,
    /// Writes are visible to the very next lookup.
    Iteration,
}

/// Per-example past predictions (softmax at τ = 1) for PS-KD.
#[derive(Debug, Clone)]
pub struct PastPredictions {
    level: StoreLevel,
    classes: usize,
    entries: Vec<Option<Vec<f64>>>,
    pending: Vec<(usize, Vec<f64>)>,
}

impl PastPredictions {
    pub fn new(level: StoreLevel, num_examples: usize, classes: usize) -> Self {
        Self { level, classes, entries: vec![None; num_examples], pending: Vec::new() }
    }

    pub fn level(&self) -> StoreLevel {
        self.level
    }

    pub fn get(&self, example: usize) -> Option<&[f64]> {
        self.entries.get(example).and_then(|e| e.as_deref())
    }

    /// Stores `softmax(logits_r)` for each example id, row-aligned.
    pub fn record_logits(&mut self, ids: &[usize], logits: &[f64]) -> Result<()> {
        let t = SoftTargets::from_logits(logits, self.classes, 1.0)?;
        if t.rows() != ids.len() {
            bail!(Shape, "{} prediction rows for {} example ids", t.rows(), ids.len());
        }
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.entries.len() {
                bail!(Shape, "example id {id} outside store of {}", self.entries.len());
            }
            let row = t.row(r).to_vec();
            match self.level {
                StoreLevel::Epoch => self.pending.push((id, row)),
                StoreLevel::Iteration => self.entries[id] = Some(row),
            }
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        for (id, row) in self.pending.drain(..) {
            self.entries[id] = Some(row);
        }
    }

    pub fn lookup(&self, ids: &[usize]) -> Vec<Option<&[f64]>> {
        ids.iter().map(|&i| self.get(i)).collect()
    }
}

/// DLB: τ-softened predictions of the half-batch that will be replayed next.
#[derive(Debug, Clone)]
pub struct CarriedTargets {
    tau: f64,
    stored: Option<(Vec<usize>, SoftTargets)>,
}

impl CarriedTargets {
    pub fn new(tau: f64) -> Self {
        Self { tau, stored: None }
    }

    /// Remembers the trailing `ids.len()` rows of `logits` (row-major, `classes` wide).
    pub fn store(&mut self, ids: &[usize], logits: &[f64], classes: usize) -> Result<()> {
        let t = SoftTargets::from_logits(logits, classes, self.tau)?;
        if t.rows() < ids.len() {
            bail!(Shape, "cannot carry {} rows from {}", ids.len(), t.rows());
        }
        let tail = t.rows_range(t.rows() - ids.len(), t.rows());
        self.stored = Some((ids.to_vec(), tail));
        Ok(())
    }

    /// Targets for a batch whose first `carried` entries are `ids[..carried]`.
    /// Returns `None` when nothing was stored or the ids do not line up.
    pub fn targets_for(&self, ids: &[usize], carried: usize) -> Option<SoftTargets> {
        let (prev, t) = self.stored.as_ref()?;
        (carried > 0 && carried == prev.len() && ids.get(..carried) == Some(prev.as_slice())).then(|| t.clone())
    }

    pub fn clear(&mut self) {
        self.stored = None;
    }
}
