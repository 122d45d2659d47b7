//! Temperature-softened distributions and the self-distillation losses.
//!
//! Every loss is recorded on a [`Tape`] so it can be differentiated, and
//! every soft target enters as a constant leaf, which is what makes the
//! stop-gradient exact. The `τ²` factor is applied once, inside
//! [`kl_divergence`].

mod objective;
mod store;

pub use objective::{companion_targets, record_step_loss, DistillObjective, StepBatch, StepTargets};
pub use store::{CarriedTargets, PastPredictions, StoreLevel};

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::tensor::{log_softmax_row, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistillKind {
    None,
    Kd,
    Cskd,
    Pskd,
    Dlb,
}

impl DistillKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Kd => "kd",
            Self::Cskd => "cskd",
            Self::Pskd => "pskd",
            Self::Dlb => "dlb",
        }
    }
}

impl fmt::Display for DistillKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "kd" => Self::Kd,
            "cskd" => Self::Cskd,
            "pskd" => Self::Pskd,
            "dlb" => Self::Dlb,
            _ => bail!(Config, "unknown distillation kind {s:?}"),
        })
    }
}

/// How the PS-KD mixing weight evolves during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSchedule {
    Fixed(f64),
    LinearGrowth(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pruning,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSpec {
    pub kind: DistillKind,
    pub tau: f64,
    /// PS-KD mixing weight used while pruning.
    pub alpha: f64,
    pub lambda_cls: f64,
    pub alpha_schedule: AlphaSchedule,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self { kind: DistillKind::None, tau: 4.0, alpha: 0.1, lambda_cls: 1.0, alpha_schedule: AlphaSchedule::LinearGrowth(0.8) }
    }
}

impl DistillSpec {
    pub fn ce() -> Self {
        Self { kind: DistillKind::None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bail!(Config, "temperature must be positive, got {}", self.tau);
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!(Config, "alpha must lie in [0, 1], got {}", self.alpha);
        }
        let target = match self.alpha_schedule {
            AlphaSchedule::Fixed(v) | AlphaSchedule::LinearGrowth(v) => v,
        };
        if !(0.0..=1.0).contains(&target) {
            bail!(Config, "alpha schedule value must lie in [0, 1], got {target}");
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_cls.is_finite()) {
            bail!(Config, "lambda_cls must be nonnegative, got {}", self.lambda_cls);
        }
        Ok(())
    }

    /// Short identifier used in logs, e.g. `ce` or `sd:pskd`.
    pub fn loss_id(&self) -> String {
        match self.kind {
            DistillKind::None => "ce".into(),
            k => format!("sd:{k}"),
        }
    }
}

/// PS-KD mixing weight. Pruning uses the fixed `spec.alpha`; training
/// follows the schedule, growing linearly to its target at the last epoch.
pub fn pskd_alpha_at(spec: &DistillSpec, epoch: usize, total_epochs: usize, phase: Phase) -> f64 {
    match phase {
        Phase::Pruning => spec.alpha,
        Phase::Training => match spec.alpha_schedule {
            AlphaSchedule::Fixed(v) => v,
            AlphaSchedule::LinearGrowth(target) => target * (epoch + 1) as f64 / total_epochs.max(1) as f64,
        },
    }
}

/// Per-row probabilities together with the log-probabilities they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub classes: usize,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl SoftTargets {
    /// `softmax(z / τ)` row-wise over `[rows, classes]` logits.
    pub fn from_logits(logits: &[f64], classes: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            bail!(Config, "temperature must be positive, got {tau}");
        }
        if classes == 0 || !logits.len().is_multiple_of(classes) {
            bail!(Shape, "{} logits do not split into rows of {classes}", logits.len());
        }
        let inv = 1.0 / tau;
        let mut log_probs = Vec::with_capacity(logits.len());
        for row in logits.chunks_exact(classes) {
            let scaled: Vec<f64> = row.iter().map(|&v| v.scale(inv)).collect();
            log_probs.extend(log_softmax_row(&scaled));
        }
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        Ok(Self { classes, probs, log_probs })
    }

    /// Wraps explicit distributions; rows must be nonnegative and sum to 1.
    pub fn from_probs(probs: Vec<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || !probs.len().is_multiple_of(classes) {
            bail!(Shape, "{} probabilities do not split into rows of {classes}", probs.len());
        }
        for row in probs.chunks_exact(classes) {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                bail!(Numerics, "soft target row {row:?} is not a probability vector");
            }
        }
        // 0·log 0 is taken as 0; any finite stand-in gives that product.
        let log_probs = probs.iter().map(|&p| if p > 0.0 { p.ln() } else { 0.0 }).collect();
        Ok(Self { classes, probs, log_probs })
    }

    pub fn rows(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.classes..(r + 1) * self.classes]
    }

    pub fn rows_range(&self, start: usize, end: usize) -> Self {
        let (a, b) = (start * self.classes, end * self.classes);
        Self { classes: self.classes, probs: self.probs[a..b].to_vec(), log_probs: self.log_probs[a..b].to_vec() }
    }
}

/// Row-wise `softmax(logits / τ)` of a `[n, C]` tensor.
pub fn softened_distribution(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let &[n, c] = logits.shape() else {
        bail!(Shape, "expected [n, C] logits, got {:?}", logits.shape());
    };
    let t = SoftTargets::from_logits(logits.data(), c, tau)?;
    Tensor::new(vec![n, c], t.probs)
}

fn constant<T: Scalar>(tape: &mut Tape<T>, shape: Vec<usize>, data: &[f64]) -> Result<Var> {
    tape.constant(shape, data.iter().map(|&v| T::from_f64(v)).collect())
}

fn logits_dims<T: Scalar>(tape: &Tape<T>, logits: Var) -> Result<(usize, usize)> {
    match *tape.shape(logits) {
        [n, c] => Ok((n, c)),
        ref s => bail!(Shape, "expected [n, C] logits, got {s:?}"),
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            bail!(Shape, "label {l} out of range for {classes} classes");
        }
        out[r * classes + l] = 1.0;
    }
    Ok(out)
}

/// `−(1/n) Σ_r Σ_j t_rj · log softmax(z_r)_j` against constant targets.
pub fn soft_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[f64]) -> Result<Var> {
    let (n, c) = logits_dims(tape, logits)?;
    if targets.len() != n * c {
        bail!(Shape, "{} targets for [{n}, {c}] logits", targets.len());
    }
    let t = constant(tape, vec![n, c], targets)?;
    let ls = tape.log_softmax(logits)?;
    let prod = tape.mul(t, ls)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / n as f64)
}

pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = logits_dims(tape, logits)?;
    if labels.len() != n {
        bail!(Shape, "{} labels for {n} logit rows", labels.len());
    }
    soft_cross_entropy(tape, logits, &one_hot(labels, c)?)
}

/// `τ² · (1/n) Σ_r KL(target_r ‖ softmax(z_r / τ))`.
pub fn kl_divergence<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &SoftTargets, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        bail!(Config, "temperature must be positive, got {tau}");
    }
    let (n, c) = logits_dims(tape, logits)?;
    if target.classes != c || target.rows() != n {
        bail!(Shape, "targets [{}, {}] vs logits [{n}, {c}]", target.rows(), target.classes);
    }
    let p = constant(tape, vec![n, c], &target.probs)?;
    let logp = constant(tape, vec![n, c], &target.log_probs)?;
    let scaled = tape.scale(logits, 1.0 / tau)?;
    let logq = tape.log_softmax(scaled)?;
    let diff = tape.sub(logp, logq)?;
    let prod = tape.mul(p, diff)?;
    let total = tape.sum(prod)?;
    tape.scale(total, tau * tau / n as f64)
}

/// Classic KD against constant teacher logits.
pub fn kd_loss<T: Scalar>(tape: &mut Tape<T>, teacher_logits: &[f64], student: Var, tau: f64) -> Result<Var> {
    let (_, c) = logits_dims(tape, student)?;
    let target = SoftTargets::from_logits(teacher_logits, c, tau)?;
    kl_divergence(tape, student, &target, tau)
}

/// `CE(x) + λ_cls · τ² · KL(P̃(x̄) ‖ P̃(x))` with the companion side constant.
pub fn cskd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    companion: &SoftTargets,
    spec: &DistillSpec,
) -> Result<Var> {
    let ce = cross_entropy(tape, logits, labels)?;
    if spec.lambda_cls == 0.0 {
        return Ok(ce);
    }
    let kl = kl_divergence(tape, logits, companion, spec.tau)?;
    let kl = tape.scale(kl, spec.lambda_cls)?;
    tape.add(ce, kl)
}

/// PS-KD targets `(1−α)·onehot + α·past`; rows without history use α = 0.
pub fn pskd_targets(labels: &[usize], classes: usize, past: &[Option<&[f64]>], alpha: f64) -> Result<Vec<f64>> {
    if past.len() != labels.len() {
        bail!(Shape, "{} past rows for {} labels", past.len(), labels.len());
    }
    let mut t = one_hot(labels, classes)?;
    for (r, p) in past.iter().enumerate() {
        let Some(p) = p else { continue };
        if p.len() != classes {
            bail!(Shape, "past prediction of length {} for {classes} classes", p.len());
        }
        for (tj, &pj) in t[r * classes..(r + 1) * classes].iter_mut().zip(p.iter()) {
            *tj = (1.0 - alpha) * *tj + alpha * pj;
        }
    }
    Ok(t)
}

pub fn pskd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    past: &[Option<&[f64]>],
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!(Config, "alpha must lie in [0, 1], got {alpha}");
    }
    let (_, c) = logits_dims(tape, logits)?;
    let targets = pskd_targets(labels, c, past, alpha)?;
    soft_cross_entropy(tape, logits, &targets)
}

/// CE over the full batch plus `λ_cls · τ² · KL` on the leading carried rows.
/// Without stored targets (first iteration) only the CE term remains.
pub fn dlb_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    carried: Option<&SoftTargets>,
    spec: &DistillSpec,
) -> Result<Var> {
    let ce = cross_entropy(tape, logits, labels)?;
    let Some(stored) = carried else { return Ok(ce) };
    if spec.lambda_cls == 0.0 || stored.rows() == 0 {
        return Ok(ce);
    }
    let (n, c) = logits_dims(tape, logits)?;
    if stored.rows() > n {
        bail!(Shape, "{} carried rows in a batch of {n}", stored.rows());
    }
    let head = tape.slice(logits, 0, vec![stored.rows(), c])?;
    let kl = kl_divergence(tape, head, stored, spec.tau)?;
    let kl = tape.scale(kl, spec.lambda_cls)?;
    tape.add(ce, kl)
}
