use std::fmt;
use std::str::FromStr;

use log::info;

use super::{evaluate, probe_batch, train, MetricsLog, ProbeConfig, TrainSchedule};
use crate::data::{mix64, Dataset, Split};
use crate::distill::{DistillKind, DistillSpec};
use crate::error::{bail, Error, Result};
use crate::metrics::{aurc, ece, mean_jsv, CalibrationRecord};
use crate::model::{build_model, Arch, MaskedModel};
use crate::prune::{
    epsd_saliency, magnitude_saliency, pruning_batches, prospr_saliency, run_schedule, snip_saliency, Criterion,
    Granularity, PruneBatchConfig, PruneSchedule, RoundLog, SaliencyConfig, SaliencyMap,
};

/// Loss used in one step of a regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossChoice {
    Ce,
    Sd,
}

impl LossChoice {
    fn name(self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Sd => "sd",
        }
    }

    pub fn spec(self, sd: &DistillSpec) -> DistillSpec {
        match self {
            Self::Ce => DistillSpec::ce(),
            Self::Sd => *sd,
        }
    }
}

impl FromStr for LossChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ce" => Ok(Self::Ce),
            "sd" => Ok(Self::Sd),
            other => bail!(Config, "unknown loss '{other}', expected ce or sd"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Unpruned,
    SdOnly,
    PruningOnly,
    /// CE-loss pruning followed by SD training (SC-1).
    SimpleCombination,
    Epsd,
    /// SD pre-training, CE-loss pruning, SD re-training.
    Sc2,
    /// SD pre-training, SD-loss pruning, SD re-training.
    PtEpsd,
    Ablation { prune: LossChoice, train: LossChoice },
}

/// The losses of a regime's three stages: pre-training, pruning, training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub pretrain: Option<LossChoice>,
    pub prune: Option<LossChoice>,
    pub train: LossChoice,
}

impl Regime {
    pub fn stages(self) -> Stages {
        use LossChoice::{Ce, Sd};
        let (pretrain, prune, train) = match self {
            Self::Unpruned => (None, None, Ce),
            Self::SdOnly => (None, None, Sd),
            Self::PruningOnly => (None, Some(Ce), Ce),
            Self::SimpleCombination => (None, Some(Ce), Sd),
            Self::Epsd => (None, Some(Sd), Sd),
            Self::Sc2 => (Some(Sd), Some(Ce), Sd),
            Self::PtEpsd => (Some(Sd), Some(Sd), Sd),
            Self::Ablation { prune, train } => (None, Some(prune), train),
        };
        Stages { pretrain, prune, train }
    }

    pub fn prunes(self) -> bool {
        self.stages().prune.is_some()
    }

    pub fn uses_sd(self) -> bool {
        let s = self.stages();
        [s.pretrain, s.prune, Some(s.train)].contains(&Some(LossChoice::Sd))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unpruned => f.write_str("unpruned"),
            Self::SdOnly => f.write_str("sd_only"),
            Self::PruningOnly => f.write_str("pruning_only"),
            Self::SimpleCombination => f.write_str("simple_combination"),
            Self::Epsd => f.write_str("epsd"),
            Self::Sc2 => f.write_str("sc2"),
            Self::PtEpsd => f.write_str("pt_epsd"),
            Self::Ablation { prune, train } => write!(f, "ablation:{}:{}", prune.name(), train.name()),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "unpruned" => Self::Unpruned,
            "sd_only" => Self::SdOnly,
            "pruning_only" => Self::PruningOnly,
            "simple_combination" | "sc1" => Self::SimpleCombination,
            "epsd" => Self::Epsd,
            "sc2" => Self::Sc2,
            "pt_epsd" => Self::PtEpsd,
            _ => match s.strip_prefix("ablation:").and_then(|r| r.split_once(':')) {
                Some((p, t)) => Self::Ablation { prune: p.parse()?, train: t.parse()? },
                None => bail!(Config, "unknown regime '{s}'"),
            },
        })
    }
}

/// How the pruning step removes weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneStage {
    OneShot,
    /// `rounds` prune/recover cycles whose cumulative sparsity reaches the target.
    Iterative { rounds: usize, recovery_epochs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeConfig {
    pub arch: Arch,
    pub sparsity: f64,
    pub granularity: Granularity,
    /// Criterion for CE-loss pruning; SD-loss pruning always uses the EPSD saliency.
    pub ce_criterion: Criterion,
    pub saliency: SaliencyConfig,
    pub per_class: usize,
    /// `None` picks the method default: PS-KD repeats one batch, the others draw fresh ones.
    pub new_batch_per_step: Option<bool>,
    pub stage: PruneStage,
    pub distill: DistillSpec,
    pub train: TrainSchedule,
    pub pretrain_epochs: usize,
    pub probes: ProbeConfig,
    pub seed: u64,
}

impl RegimeConfig {
    pub fn new_batch_per_step(&self) -> bool {
        self.new_batch_per_step.unwrap_or(self.distill.kind != DistillKind::Pskd)
    }

    pub fn prune_schedule(&self) -> PruneSchedule {
        match self.stage {
            PruneStage::OneShot => PruneSchedule::OneShot { sparsity: self.sparsity },
            PruneStage::Iterative { rounds, recovery_epochs } => {
                let fraction = 1.0 - (1.0 - self.sparsity).powf(1.0 / rounds.max(1) as f64);
                PruneSchedule::Iterative { fraction, rounds, recovery_epochs }
            }
        }
    }

    /// Checks that `regime` can run under this configuration.
    pub fn check(&self, regime: Regime) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        if !(0.0..1.0).contains(&self.sparsity) {
            bail!(Config, "sparsity must lie in [0, 1), got {}", self.sparsity);
        }
        if !regime.prunes() && self.sparsity > 0.0 {
            bail!(Config, "regime {regime} does not prune but sparsity is {}", self.sparsity);
        }
        if regime.uses_sd() && matches!(self.distill.kind, DistillKind::None | DistillKind::Kd) {
            bail!(Config, "regime {regime} needs a self-distillation method (cskd, pskd or dlb), got {}", self.distill.kind);
        }
        if self.ce_criterion == Criterion::Epsd {
            bail!(Config, "the CE-loss pruning criterion cannot be epsd");
        }
        if self.saliency.steps == 0 {
            bail!(Config, "pruning needs at least one unrolled step");
        }
        if self.per_class == 0 {
            bail!(Config, "pruning batches need at least one example per class");
        }
        if let PruneStage::Iterative { rounds: 0, .. } = self.stage {
            bail!(Config, "iterative pruning needs at least one round");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RegimeReport {
    pub regime: Regime,
    pub pretrain_loss: Option<String>,
    pub prune_loss: Option<String>,
    pub train_loss: String,
    pub sparsity: f64,
    pub rounds: Vec<RoundLog>,
    pub test_acc: f64,
    pub ece: f64,
    pub aurc: f64,
    pub mean_jsv: f64,
    pub records: Vec<CalibrationRecord>,
    pub log: MetricsLog,
    pub model: MaskedModel,
}

fn score(
    model: &MaskedModel,
    loss: LossChoice,
    cfg: &RegimeConfig,
    data: &Dataset,
    round: usize,
) -> Result<SaliencyMap> {
    let batch_cfg = PruneBatchConfig {
        steps: cfg.saliency.steps,
        per_class: cfg.per_class,
        new_batch_per_step: cfg.new_batch_per_step(),
        seed: mix64(cfg.seed ^ 0x9E37_79B9).wrapping_add(round as u64),
    };
    // Batches follow the configured SD method for either loss, so CE- and
    // SD-loss pruning see identical data and differ only in the objective.
    let batches = pruning_batches(data, cfg.distill.kind, &batch_cfg)?;
    let n = data.len();
    match loss {
        LossChoice::Sd => epsd_saliency(model, batches, &cfg.saliency, &cfg.distill, n),
        LossChoice::Ce => match cfg.ce_criterion {
            Criterion::Magnitude => magnitude_saliency(model),
            Criterion::Snip => snip_saliency(model, batches.into_iter().next().expect("steps ≥ 1"), n),
            Criterion::Prospr => prospr_saliency(model, batches, &cfg.saliency, n),
            Criterion::Epsd => bail!(Config, "the CE-loss pruning criterion cannot be epsd"),
        },
    }
}

/// A model after the pre-training and pruning stages of a regime.
#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub model: MaskedModel,
    pub rounds: Vec<RoundLog>,
    /// Saliency of the last pruning round.
    pub saliency: Option<SaliencyMap>,
}

/// Runs the pre-training and pruning stages of `regime`, without the final training.
pub fn prune_for_regime(regime: Regime, cfg: &RegimeConfig, data: &Dataset) -> Result<PrunedModel> {
    cfg.check(regime)?;
    let stages = regime.stages();
    let sd = cfg.distill;
    let mut model = build_model(&cfg.arch, cfg.seed)?;
    let quiet = ProbeConfig { eval_every_epoch: false, jsv_steps: 0, ..cfg.probes.clone() };

    if let Some(loss) = stages.pretrain {
        let schedule = cfg.train.with_epochs(cfg.pretrain_epochs);
        model = train(&model, &schedule, &loss.spec(&sd), data, mix64(cfg.seed ^ 0x5EED), &quiet)?.model;
    }

    let mut rounds = Vec::new();
    let mut saliency = None;
    if let Some(loss) = stages.prune {
        let train_spec = stages.train.spec(&sd);
        let recovery = |m: MaskedModel, round: usize, epochs: usize| -> Result<MaskedModel> {
            let schedule = cfg.train.with_epochs(epochs);
            let seed = mix64(cfg.seed ^ 0x2EC0).wrapping_add(round as u64);
            Ok(train(&m, &schedule, &train_spec, data, seed, &quiet)?.model)
        };
        let (pruned, log) = run_schedule(
            model,
            &cfg.prune_schedule(),
            cfg.granularity,
            |m, round| {
                let s = score(m, loss, cfg, data, round)?;
                saliency = Some(s.clone());
                Ok(s)
            },
            recovery,
        )?;
        model = pruned;
        rounds = log;
    }
    Ok(PrunedModel { model, rounds, saliency })
}

/// Runs one regime end to end on `data`.
pub fn run_regime(regime: Regime, cfg: &RegimeConfig, data: &Dataset) -> Result<RegimeReport> {
    let PrunedModel { model, rounds, .. } = prune_for_regime(regime, cfg, data)?;
    let stages = regime.stages();
    let sd = cfg.distill;
    let train_spec = stages.train.spec(&sd);
    let outcome = train(&model, &cfg.train, &train_spec, data, cfg.seed, &cfg.probes)?;
    let (test_acc, records) = evaluate(&outcome.model, data, Split::Test)?;
    let report = RegimeReport {
        regime,
        pretrain_loss: stages.pretrain.map(|l| l.spec(&sd).loss_id()),
        prune_loss: rounds.first().map(|r| r.loss_used.clone()),
        train_loss: train_spec.loss_id(),
        sparsity: outcome.model.mask().sparsity(),
        rounds,
        test_acc,
        ece: ece(&records, cfg.probes.ece_bins)?,
        aurc: aurc(&records)?,
        mean_jsv: mean_jsv(&outcome.model, &probe_batch(data, cfg.probes.jsv_batch)?)?,
        records,
        log: outcome.log,
        model: outcome.model,
    };
    info!(
        "{regime} seed {} sparsity {:.3}: acc {:.4} (prune loss {:?}, train loss {})",
        cfg.seed, report.sparsity, report.test_acc, report.prune_loss, report.train_loss
    );
    Ok(report)
}
