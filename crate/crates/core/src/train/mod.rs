//! Masked SGD training with optional self-distillation, and the experimental regimes.

mod log;
mod regime;

pub use log::{MetricsLog, MetricsRow};
pub use regime::{prune_for_regime, run_regime, LossChoice, PruneStage, PrunedModel, Regime, RegimeConfig, RegimeReport, Stages};

use crate::data::{mix64, BatchKind, BatchPlan, Dataset, Sampler, Split};
use crate::distill::{
    companion_targets, pskd_alpha_at, pskd_targets, record_step_loss, CarriedTargets, DistillKind, DistillSpec,
    PastPredictions, Phase, StepBatch, StepTargets, StoreLevel,
};
use crate::error::{bail, Error, Result};
use crate::metrics::{accuracy, aurc, calibration_records, ece, mean_jsv, CalibrationRecord, DEFAULT_ECE_BINS};
use crate::model::{record_logits, MaskedModel};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub drop_factor: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![15, 25],
            drop_factor: 0.1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            bail!(Config, "drop factor must lie in (0, 1], got {}", self.drop_factor);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "weight decay must be nonnegative, got {}", self.weight_decay);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "lr drop epochs must be strictly increasing, got {:?}", self.lr_drop_epochs);
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                bail!(Config, "lr drop epoch {last} is not before the last epoch ({})", self.epochs);
            }
        }
        Ok(())
    }

    /// `lr · drop_factor^(number of drop epochs ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.drop_factor.powi(drops as i32)
    }

    /// Same optimizer settings, different length; drops at or past `epochs` are dropped.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        let lr_drop_epochs = self.lr_drop_epochs.iter().copied().filter(|&d| d < epochs).collect();
        Self { epochs, lr_drop_epochs, ..self.clone() }
    }
}

/// Which diagnostics `train` records.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub ece_bins: usize,
    /// Evaluate test accuracy, ECE and AURC after every epoch.
    pub eval_every_epoch: bool,
    /// Log Mean-JSV before each of the first `jsv_steps` updates.
    pub jsv_steps: usize,
    /// Size of the fixed held-out batch (leading test examples) used for Mean-JSV.
    pub jsv_batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { ece_bins: DEFAULT_ECE_BINS, eval_every_epoch: true, jsv_steps: 0, jsv_batch: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MaskedModel,
    pub log: MetricsLog,
    pub steps: usize,
}

/// Test-split accuracy with the per-example calibration records.
pub fn evaluate(model: &MaskedModel, data: &Dataset, split: Split) -> Result<(f64, Vec<CalibrationRecord>)> {
    let idx = data.indices(split);
    if idx.is_empty() {
        bail!(Config, "{split:?} split is empty");
    }
    let logits = model.forward_logits(&data.batch_tensor(&idx)?)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let records = calibration_records(&logits, &labels)?;
    Ok((accuracy(&records), records))
}

/// Leading test examples, or leading training examples when there is no test split.
pub fn probe_batch(data: &Dataset, n: usize) -> Result<Tensor> {
    let mut idx = data.indices(Split::Test);
    if idx.is_empty() {
        idx = data.indices(Split::Train);
    }
    idx.truncate(n.max(1));
    data.batch_tensor(&idx)
}

fn sampler_kind(kind: DistillKind) -> Result<BatchKind> {
    Ok(match kind {
        DistillKind::None | DistillKind::Pskd => BatchKind::Uniform,
        DistillKind::Cskd => BatchKind::PairedSameClass,
        DistillKind::Dlb => BatchKind::HalfCarryover,
        DistillKind::Kd => bail!(Config, "kd needs an external teacher network; use cskd, pskd or dlb for self-distillation"),
    })
}

/// Trains `model` on the training split with masked SGD.
///
/// Gradients of pruned weights are zeroed before every update, so the mask's
/// zeros survive momentum and weight decay. `distill` picks the step loss:
/// kind `none` is plain cross-entropy.
pub fn train(
    model: &MaskedModel,
    schedule: &TrainSchedule,
    distill: &DistillSpec,
    data: &Dataset,
    seed: u64,
    probes: &ProbeConfig,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    distill.validate()?;
    let mut log = MetricsLog::default();
    if schedule.epochs == 0 {
        return Ok(TrainOutcome { model: model.clone(), log, steps: 0 });
    }
    let plan = BatchPlan { kind: sampler_kind(distill.kind)?, batch_size: schedule.batch_size, seed: mix64(seed ^ 0x7EA1) };
    let mut sampler = Sampler::new(plan, data, data.indices(Split::Train))?;
    let layout = model.layout().clone();
    let classes = layout.classes;
    let maskable = model.num_maskable();
    let keep: Vec<bool> = model.mask().bits().to_vec();
    let mut params = model.effective_params();
    let mut velocity = vec![0.0; params.len()];
    let mut past = PastPredictions::new(StoreLevel::Epoch, data.len(), classes);
    let mut carried = CarriedTargets::new(distill.tau);
    let jsv_x = if probes.jsv_steps > 0 { Some(probe_batch(data, probes.jsv_batch)?) } else { None };
    let sparsity = model.mask().sparsity();
    let mut step = 0usize;

    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let alpha = pskd_alpha_at(distill, epoch, schedule.epochs, Phase::Training);
        let mut loss_sum = 0.0;
        let batches = sampler.batches_per_epoch();
        for _ in 0..batches {
            if let (Some(x), true) = (&jsv_x, step < probes.jsv_steps) {
                let jsv = mean_jsv(&model.with_params(params.clone())?, x)?;
                log.push(MetricsRow { epoch, step, lr: Some(lr), sparsity: Some(sparsity), mean_jsv: Some(jsv), ..Default::default() });
            }
            let batch = StepBatch::from_batch(data, &sampler.next_batch(data)?)?;
            let targets = match distill.kind {
                DistillKind::Cskd => {
                    let cx = batch.companion_x.as_ref().expect("paired sampler");
                    StepTargets::Companion(companion_targets(&layout, &params, cx, distill.tau)?)
                }
                DistillKind::Pskd => StepTargets::Mixed(pskd_targets(&batch.labels, classes, &past.lookup(&batch.ids), alpha)?),
                DistillKind::Dlb => StepTargets::Carried(carried.targets_for(&batch.ids, batch.carried)),
                _ => StepTargets::Hard,
            };

            let mut tape = Tape::<f64>::new();
            let p = tape.param(vec![params.len()], params.clone())?;
            let x = tape.constant(batch.x.shape().to_vec(), batch.x.data().to_vec())?;
            let context = |e: Error| match e {
                Error::Numerics(msg) => Error::Numerics(format!("epoch {epoch}, step {step}: {msg}")),
                other => other,
            };
            let z = record_logits(&layout, &mut tape, p, x).map_err(context)?;
            let loss = record_step_loss(&mut tape, z, &batch.labels, &targets, distill).map_err(context)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                bail!(Numerics, "epoch {epoch}, step {step}: loss is {value}");
            }
            loss_sum += value;
            match distill.kind {
                DistillKind::Pskd => past.record_logits(&batch.ids, tape.value(z).data())?,
                DistillKind::Dlb => {
                    let ids = &batch.ids[batch.ids.len() - batch.ids.len() / 2..];
                    carried.store(ids, tape.value(z).data(), classes)?;
                }
                _ => {}
            }
            let grads = tape.backward(loss).map_err(context)?;
            let g = grads.get_or_zeros(p, params.len());
            for i in 0..params.len() {
                if i < maskable && !keep[i] {
                    continue;
                }
                let gi = g[i] + schedule.weight_decay * params[i];
                velocity[i] = schedule.momentum * velocity[i] + gi;
                let dir = if schedule.nesterov { gi + schedule.momentum * velocity[i] } else { velocity[i] };
                params[i] -= lr * dir;
            }
            step += 1;
        }
        past.end_epoch();

        let mut row = MetricsRow {
            epoch,
            step,
            train_loss: Some(loss_sum / batches as f64),
            lr: Some(lr),
            sparsity: Some(sparsity),
            ..Default::default()
        };
        if probes.eval_every_epoch || epoch + 1 == schedule.epochs {
            let current = model.with_params(params.clone())?;
            if !data.indices(Split::Test).is_empty() {
                let (acc, records) = evaluate(&current, data, Split::Test).map_err(|e| match e {
                    Error::Numerics(msg) => Error::Numerics(format!("epoch {epoch}, evaluation: {msg}")),
                    other => other,
                })?;
                row.test_acc = Some(acc);
                row.ece = Some(ece(&records, probes.ece_bins)?);
                row.aurc = Some(aurc(&records)?);
            }
        }
        log.push(row);
    }
    Ok(TrainOutcome { model: model.with_params(params)?, log, steps: step })
}
