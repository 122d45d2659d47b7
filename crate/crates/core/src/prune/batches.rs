use log::warn;

use crate::data::{BatchKind, BatchPlan, Dataset, Sampler, Split};
use crate::distill::{DistillKind, StepBatch};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneBatchConfig {
    pub steps: usize,
    /// Examples per class; the batch holds `per_class × C` examples.
    pub per_class: usize,
    /// Draw a fresh batch for every unrolled step instead of repeating one.
    pub new_batch_per_step: bool,
    pub seed: u64,
}

/// Per-step pruning batches drawn from the training split.
///
/// Batches are class-balanced (`per_class` of each class) when the sampler
/// accepts the pool, uniform otherwise. `kind` decides the extras: CS-KD adds
/// same-class companions, DLB draws consecutive half-carryover batches (always
/// fresh, since the carried half links step `t` to `t−1`).
pub fn pruning_batches(dataset: &Dataset, kind: DistillKind, cfg: &PruneBatchConfig) -> Result<Vec<StepBatch>> {
    let pool = dataset.indices(Split::Train);
    let size = cfg.per_class * dataset.classes();
    if kind == DistillKind::Dlb {
        let plan = BatchPlan { kind: BatchKind::HalfCarryover, batch_size: size + size % 2, seed: cfg.seed };
        let mut sampler = Sampler::new(plan, dataset, pool)?;
        return (0..cfg.steps)
            .map(|_| StepBatch::from_batch(dataset, &sampler.next_batch(dataset)?))
            .collect();
    }
    let balanced = BatchPlan { kind: BatchKind::ClassBalanced { per_class: cfg.per_class }, batch_size: size, seed: cfg.seed };
    let mut sampler = match Sampler::new(balanced, dataset, pool.clone()) {
        Ok(s) => s,
        Err(e) => {
            warn!("class-balanced pruning batches unavailable ({e}); sampling uniformly");
            Sampler::new(BatchPlan { kind: BatchKind::Uniform, batch_size: size, seed: cfg.seed }, dataset, pool)?
        }
    };
    let distinct = if cfg.new_batch_per_step { cfg.steps } else { 1 };
    let mut out = Vec::with_capacity(cfg.steps);
    for _ in 0..distinct {
        let mut batch = sampler.next_batch(dataset)?;
        if kind == DistillKind::Cskd {
            batch.companions = Some(sampler.pair_companions(dataset, &batch.indices)?);
        }
        out.push(StepBatch::from_batch(dataset, &batch)?);
    }
    while out.len() < cfg.steps {
        out.push(out[0].clone());
    }
    Ok(out)
}
