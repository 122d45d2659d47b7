//! Mask hypergradients through unrolled gradient descent.
//!
//! With `θ_0 = m ⊙ θ_base` and `θ_{k+1} = θ_k − lr · u ⊙ ∇L_k(θ_k)`, the final
//! loss `L_{s−1}(θ_{s−1})` is differentiated with respect to `m` exactly. The
//! reverse sweep needs `v ← v − lr · H_k (u ⊙ v)`; each Hessian-vector product
//! is a backward pass over [`Dual`] numbers seeded with `u ⊙ v`.
//!
//! `steps` counts loss evaluations, so `steps = 1` is the plain gradient at
//! `θ_0` and `steps = s` performs `s − 1` updates.

use super::{Dual, Scalar, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Loss and logits recorded for one unrolled step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub loss: Var,
    pub logits: Var,
}

/// A per-step objective over a flat parameter vector.
///
/// `freeze` runs once per step on the nominal trajectory and captures every
/// stop-gradient quantity (soft targets, carried predictions). The same frozen
/// value is reused when the step is re-recorded for the reverse sweep, so the
/// differentiated function is exactly the one that produced the trajectory.
pub trait UnrolledObjective {
    type Frozen;

    fn freeze(&mut self, step: usize, params: &[f64]) -> Result<Self::Frozen>;

    fn record<T: Scalar>(&self, tape: &mut Tape<T>, params: Var, step: usize, frozen: &Self::Frozen)
        -> Result<StepVars>;

    /// Sees the nominal step's values after recording, e.g. to store predictions.
    fn observe(&mut self, _step: usize, _frozen: &Self::Frozen, _tape: &Tape<f64>, _vars: StepVars) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnrollOptions {
    /// Sum per-step gradients instead of differentiating through the updates.
    pub first_order: bool,
    /// Maximum number of parameter snapshots kept for the reverse sweep.
    pub max_checkpoints: usize,
}

impl Default for UnrollOptions {
    fn default() -> Self {
        Self { first_order: false, max_checkpoints: 16 }
    }
}

/// Parameter snapshots and losses along the nominal trajectory.
#[derive(Debug, Clone, Default)]
pub struct UnrollTrace {
    pub checkpoints: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Hypergradient {
    /// `∂L_final / ∂m`, one entry per maskable parameter.
    pub mask_grad: Vec<f64>,
    /// `∂L_final / ∂θ_0` over the full parameter vector.
    pub theta0_grad: Vec<f64>,
    pub trace: UnrollTrace,
}

/// Differentiates the final-step loss with respect to the mask.
///
/// `base` is the full parameter vector; its first `mask.len()` entries are
/// maskable. `update_mask`, when given, freezes parameters whose entry is
/// `false` during the unrolled updates.
pub fn unrolled_hypergradient<O: UnrolledObjective>(
    objective: &mut O,
    base: &[f64],
    mask: &[f64],
    update_mask: Option<&[bool]>,
    steps: usize,
    lr: f64,
    opts: &UnrollOptions,
) -> Result<Hypergradient> {
    if steps == 0 {
        bail!(Config, "unrolled hypergradient needs at least one step");
    }
    if steps > opts.max_checkpoints {
        bail!(Capacity, "{steps} unrolled steps exceed checkpoint capacity {}", opts.max_checkpoints);
    }
    if mask.len() > base.len() {
        bail!(Shape, "mask has {} entries but only {} parameters exist", mask.len(), base.len());
    }
    if let Some(u) = update_mask {
        if u.len() != mask.len() {
            bail!(Shape, "update mask length {} != mask length {}", u.len(), mask.len());
        }
    }
    let frozen_update = |i: usize| update_mask.is_some_and(|u| !u[i]);

    let mut theta: Vec<f64> = base.to_vec();
    for (t, &m) in theta.iter_mut().zip(mask) {
        *t *= m;
    }

    let mut trace = UnrollTrace::default();
    let mut frozen = Vec::with_capacity(steps);
    let mut first_order_sum = vec![0.0; base.len()];
    let mut final_grad = Vec::new();
    for k in 0..steps {
        let fz = objective.freeze(k, &theta)?;
        let (loss, grad) = nominal_step(objective, &theta, k, &fz)?;
        trace.checkpoints.push(theta.clone());
        trace.losses.push(loss);
        if opts.first_order {
            for (s, g) in first_order_sum.iter_mut().zip(&grad) {
                *s += g;
            }
        }
        if k + 1 < steps {
            for (i, (t, g)) in theta.iter_mut().zip(&grad).enumerate() {
                if i < mask.len() && frozen_update(i) {
                    continue;
                }
                *t -= lr * g;
            }
        } else {
            final_grad = grad;
        }
        frozen.push(fz);
    }

    let theta0_grad = if opts.first_order {
        first_order_sum
    } else {
        let mut v = final_grad;
        for k in (0..steps - 1).rev() {
            let mut dir = v.clone();
            for (i, d) in dir.iter_mut().enumerate().take(mask.len()) {
                if frozen_update(i) {
                    *d = 0.0;
                }
            }
            let hv = hessian_vector(objective, &trace.checkpoints[k], &dir, k, &frozen[k])?;
            for (vi, h) in v.iter_mut().zip(&hv) {
                *vi -= lr * h;
            }
        }
        v
    };

    let mask_grad = theta0_grad.iter().zip(base).take(mask.len()).map(|(g, b)| g * b).collect();
    Ok(Hypergradient { mask_grad, theta0_grad, trace })
}

fn nominal_step<O: UnrolledObjective>(objective: &mut O, theta: &[f64], step: usize, fz: &O::Frozen) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::<f64>::new();
    let params = tape.param(vec![theta.len()], theta.to_vec())?;
    let vars = objective.record(&mut tape, params, step, fz)?;
    let loss = tape.value(vars.loss).data()[0];
    if !loss.is_finite() {
        bail!(Numerics, "unrolled step {step} produced a non-finite loss");
    }
    let grads = tape.backward(vars.loss)?;
    let grad = grads.get_or_zeros(params, theta.len());
    objective.observe(step, fz, &tape, vars)?;
    Ok((loss, grad))
}

/// `H(θ) · dir` for the step-`step` loss via a dual-number backward pass.
pub fn hessian_vector<O: UnrolledObjective>(
    objective: &O,
    theta: &[f64],
    dir: &[f64],
    step: usize,
    fz: &O::Frozen,
) -> Result<Vec<f64>> {
    let mut tape = Tape::<Dual>::new();
    let data = theta.iter().zip(dir).map(|(&t, &d)| Dual::new(t, d)).collect();
    let params = tape.param(vec![theta.len()], data)?;
    let vars = objective.record(&mut tape, params, step, fz)?;
    let grads = tape.backward(vars.loss)?;
    let g = grads.get_or_zeros(params, theta.len());
    let hv: Vec<f64> = g.iter().map(|d| d.eps).collect();
    if hv.iter().any(|v| !v.is_finite()) {
        bail!(Numerics, "Hessian-vector product at step {step} is not finite");
    }
    Ok(hv)
}

/// Re-evaluates the recorded loss at checkpoint `step` of a trace.
pub fn replay_loss<O: UnrolledObjective>(objective: &O, trace: &UnrollTrace, step: usize, fz: &O::Frozen) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let theta = &trace.checkpoints[step];
    let params = tape.leaf(Tensor::new(vec![theta.len()], theta.clone())?);
    let vars = objective.record(&mut tape, params, step, fz)?;
    Ok(tape.value(vars.loss).data()[0])
}
