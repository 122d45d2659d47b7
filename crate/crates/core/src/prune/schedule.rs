use log::info;

use super::{build_mask_monotone, Granularity, SaliencyMap};
use crate::error::{bail, Result};
use crate::model::MaskedModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneSchedule {
    OneShot { sparsity: f64 },
    /// Each round removes `fraction` of the weights still alive.
    Iterative { fraction: f64, rounds: usize, recovery_epochs: usize },
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::OneShot { sparsity } if !(0.0..1.0).contains(&sparsity) => {
                bail!(Config, "one-shot sparsity must lie in [0, 1), got {sparsity}")
            }
            Self::Iterative { fraction, rounds, .. } if !(fraction > 0.0 && fraction < 1.0) || rounds == 0 => {
                bail!(Config, "iterative schedule needs fraction in (0, 1) and rounds ≥ 1, got {fraction} × {rounds}")
            }
            _ => Ok(()),
        }
    }

    pub fn rounds(&self) -> usize {
        match *self {
            Self::OneShot { .. } => 1,
            Self::Iterative { rounds, .. } => rounds,
        }
    }

    /// Cumulative sparsity after round `k` (1-based): `1 − (1 − f)^k`.
    pub fn sparsity_after(&self, k: usize) -> f64 {
        match *self {
            Self::OneShot { sparsity } => sparsity,
            Self::Iterative { fraction, .. } => 1.0 - (1.0 - fraction).powi(k as i32),
        }
    }

    pub fn final_sparsity(&self) -> f64 {
        self.sparsity_after(self.rounds())
    }

    pub fn recovery_epochs(&self) -> usize {
        match *self {
            Self::OneShot { .. } => 0,
            Self::Iterative { recovery_epochs, .. } => recovery_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub target_sparsity: f64,
    pub sparsity: f64,
    pub zeros: usize,
    pub loss_used: String,
}

/// Prune → recover → prune … for every round, without recovery after the
/// last one; the caller runs the full training schedule afterwards.
///
/// Round `k` targets the cumulative sparsity `1 − (1−f)^k`, so the final
/// zero count is `⌈(1 − (1−f)^R)·N⌉` rather than an accumulation of
/// per-round ceilings.
pub fn run_schedule(
    model: MaskedModel,
    schedule: &PruneSchedule,
    granularity: Granularity,
    mut score: impl FnMut(&MaskedModel, usize) -> Result<SaliencyMap>,
    mut recover: impl FnMut(MaskedModel, usize, usize) -> Result<MaskedModel>,
) -> Result<(MaskedModel, Vec<RoundLog>)> {
    schedule.validate()?;
    let mut model = model;
    let mut log = Vec::with_capacity(schedule.rounds());
    for round in 0..schedule.rounds() {
        let target = schedule.sparsity_after(round + 1);
        let saliency = score(&model, round)?;
        let mask = build_mask_monotone(&saliency, model.layout(), target, granularity, Some(model.mask()))?;
        debug_assert!(model.mask().is_subset_zero_of(&mask));
        model = model.apply_mask(&mask)?;
        info!("round {round}: sparsity {:.4} (target {target:.4}) via {}", mask.sparsity(), saliency.loss_used);
        log.push(RoundLog {
            round,
            target_sparsity: target,
            sparsity: mask.sparsity(),
            zeros: mask.zeros(),
            loss_used: saliency.loss_used.clone(),
        });
        if round + 1 < schedule.rounds() {
            model = recover(model, round, schedule.recovery_epochs())?;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Arch};
    use crate::prune::{magnitude_saliency, target_zeros};

    #[test]
    fn seven_rounds_of_twenty_percent() {
        let s = PruneSchedule::Iterative { fraction: 0.2, rounds: 7, recovery_epochs: 1 };
        assert!((s.final_sparsity() - (1.0 - 0.8f64.powi(7))).abs() < 1e-15);
        let model = build_model(&Arch::Mlp(vec![12, 12, 12]), 3).unwrap();
        let mut recoveries = 0;
        let (out, log) = run_schedule(
            model,
            &s,
            Granularity::Element,
            |m, _| magnitude_saliency(m),
            |m, _, _| {
                recoveries += 1;
                Ok(m)
            },
        )
        .unwrap();
        assert_eq!(recoveries, 6);
        assert_eq!(log.len(), 7);
        assert_eq!(out.mask().zeros(), target_zeros(s.final_sparsity(), out.num_maskable()));
    }

    #[test]
    fn single_round_equals_oneshot() {
        let model = build_model(&Arch::Mlp(vec![6, 8, 3]), 1).unwrap();
        let it = PruneSchedule::Iterative { fraction: 0.4, rounds: 1, recovery_epochs: 5 };
        let one = PruneSchedule::OneShot { sparsity: 0.4 };
        let run = |s: &PruneSchedule| {
            run_schedule(model.clone(), s, Granularity::Element, |m, _| magnitude_saliency(m), |m, _, _| Ok(m)).unwrap().0
        };
        assert_eq!(run(&it), run(&one));
    }

    #[test]
    fn invalid_schedules() {
        assert!(PruneSchedule::OneShot { sparsity: 1.0 }.validate().is_err());
        assert!(PruneSchedule::Iterative { fraction: 0.0, rounds: 3, recovery_epochs: 0 }.validate().is_err());
        assert!(PruneSchedule::Iterative { fraction: 0.2, rounds: 0, recovery_epochs: 0 }.validate().is_err());
    }
}
