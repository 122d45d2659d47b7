//! Step-level loss selection and the unrolled pruning objective.

use super::{
    cross_entropy, cskd_loss, dlb_loss, pskd_targets, soft_cross_entropy, CarriedTargets, DistillKind, DistillSpec,
    PastPredictions, SoftTargets, StoreLevel,
};
use crate::data::{Batch, Dataset};
use crate::error::{bail, Result};
use crate::model::{record_logits, Layout};
use crate::tensor::unroll::{StepVars, UnrolledObjective};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A mini-batch materialized as tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub companion_x: Option<Tensor>,
    /// Leading rows replayed from the previous batch.
    pub carried: usize,
}

impl StepBatch {
    pub fn from_batch(dataset: &Dataset, batch: &Batch) -> Result<Self> {
        let companion_x = match &batch.companions {
            Some(c) => Some(dataset.batch_tensor(c)?),
            None => None,
        };
        Ok(Self {
            x: dataset.batch_tensor(&batch.indices)?,
            labels: batch.indices.iter().map(|&i| dataset.label(i)).collect(),
            ids: batch.indices.clone(),
            companion_x,
            carried: batch.carried,
        })
    }
}

/// Stop-gradient quantities for one step, fixed before the step is recorded.
#[derive(Debug, Clone, PartialEq)]
pub enum StepTargets {
    Hard,
    Companion(SoftTargets),
    Mixed(Vec<f64>),
    Carried(Option<SoftTargets>),
}

impl StepTargets {
    /// Whether a distillation term is active in this step.
    pub fn is_soft(&self) -> bool {
        !matches!(self, Self::Hard | Self::Carried(None))
    }
}

fn input_leaf<T: Scalar>(tape: &mut Tape<T>, x: &Tensor) -> Result<Var> {
    tape.constant(x.shape().to_vec(), x.data().iter().map(|&v| T::from_f64(v)).collect())
}

/// `softmax(f(x̄) / τ)` for companion inputs at fixed parameters.
pub fn companion_targets(layout: &Layout, params: &[f64], companion_x: &Tensor, tau: f64) -> Result<SoftTargets> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(vec![params.len()], params.to_vec())?;
    let x = input_leaf(&mut tape, companion_x)?;
    let z = record_logits(layout, &mut tape, p, x)?;
    SoftTargets::from_logits(tape.value(z).data(), layout.classes, tau)
}

/// Records the step loss selected by `targets`.
pub fn record_step_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    targets: &StepTargets,
    spec: &DistillSpec,
) -> Result<Var> {
    match targets {
        StepTargets::Hard => cross_entropy(tape, logits, labels),
        StepTargets::Companion(t) => cskd_loss(tape, logits, labels, t, spec),
        StepTargets::Mixed(t) => soft_cross_entropy(tape, logits, t),
        StepTargets::Carried(t) => dlb_loss(tape, logits, labels, t.as_ref(), spec),
    }
}

/// Pruning objective over a fixed list of per-step batches.
///
/// Soft targets follow each method's own history rule: CS-KD companions are
/// scored at the current parameters, PS-KD mixes in the previous step's
/// predictions (iteration level), DLB replays the previous step's carried
/// half. Steps without history fall back to plain cross-entropy terms.
#[derive(Debug, Clone)]
pub struct DistillObjective<'a> {
    layout: &'a Layout,
    spec: DistillSpec,
    batches: Vec<StepBatch>,
    past: PastPredictions,
    carried: CarriedTargets,
}

impl<'a> DistillObjective<'a> {
    pub fn new(layout: &'a Layout, spec: DistillSpec, batches: Vec<StepBatch>, num_examples: usize) -> Result<Self> {
        spec.validate()?;
        if spec.kind == DistillKind::Kd {
            bail!(Config, "kd needs an external teacher network; use cskd, pskd or dlb for self-distillation");
        }
        if batches.is_empty() {
            bail!(Config, "pruning objective needs at least one batch");
        }
        if spec.kind == DistillKind::Cskd && batches.iter().any(|b| b.companion_x.is_none()) {
            bail!(Sampler, "cskd pruning batches need same-class companions");
        }
        Ok(Self {
            layout,
            past: PastPredictions::new(StoreLevel::Iteration, num_examples, layout.classes),
            carried: CarriedTargets::new(spec.tau),
            spec,
            batches,
        })
    }

    pub fn batches(&self) -> &[StepBatch] {
        &self.batches
    }

    fn batch(&self, step: usize) -> Result<&StepBatch> {
        match self.batches.get(step) {
            Some(b) => Ok(b),
            None => bail!(Config, "step {step} has no batch ({} supplied)", self.batches.len()),
        }
    }
}

impl UnrolledObjective for DistillObjective<'_> {
    type Frozen = StepTargets;

    fn freeze(&mut self, step: usize, params: &[f64]) -> Result<StepTargets> {
        let b = self.batch(step)?;
        Ok(match self.spec.kind {
            DistillKind::None | DistillKind::Kd => StepTargets::Hard,
            DistillKind::Cskd => {
                let cx = b.companion_x.as_ref().expect("checked in new");
                StepTargets::Companion(companion_targets(self.layout, params, cx, self.spec.tau)?)
            }
            DistillKind::Pskd => {
                StepTargets::Mixed(pskd_targets(&b.labels, self.layout.classes, &self.past.lookup(&b.ids), self.spec.alpha)?)
            }
            DistillKind::Dlb => StepTargets::Carried(self.carried.targets_for(&b.ids, b.carried)),
        })
    }

    fn record<T: Scalar>(&self, tape: &mut Tape<T>, params: Var, step: usize, frozen: &StepTargets) -> Result<StepVars> {
        let b = self.batch(step)?;
        let x = input_leaf(tape, &b.x)?;
        let logits = record_logits(self.layout, tape, params, x)?;
        let loss = record_step_loss(tape, logits, &b.labels, frozen, &self.spec)?;
        Ok(StepVars { loss, logits })
    }

    fn observe(&mut self, step: usize, _: &StepTargets, tape: &Tape<f64>, vars: StepVars) -> Result<()> {
        let ids = self.batch(step)?.ids.clone();
        let logits = tape.value(vars.logits).data();
        match self.spec.kind {
            DistillKind::Pskd => self.past.record_logits(&ids, logits),
            DistillKind::Dlb => self.carried.store(&ids[ids.len() - ids.len() / 2..], logits, self.layout.classes),
            _ => Ok(()),
        }
    }
}
