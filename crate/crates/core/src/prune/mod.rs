//! Saliency criteria, global mask construction and pruning schedules.

mod batches;
mod export;
mod schedule;

pub use batches::{pruning_batches, PruneBatchConfig};
pub use export::{read_mask_file, write_mask_file, write_saliency_csv, MASK_MAGIC, MASK_VERSION};
pub use schedule::{run_schedule, PruneSchedule, RoundLog};

use std::fmt;
use std::str::FromStr;

use crate::distill::{DistillKind, DistillObjective, DistillSpec, StepBatch};
use crate::error::{bail, Error, Result};
use crate::model::{ChannelMask, Layout, Mask, MaskedModel};
use crate::tensor::unroll::{unrolled_hypergradient, UnrollOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Magnitude,
    Snip,
    Prospr,
    Epsd,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Magnitude => "magnitude",
            Self::Snip => "snip",
            Self::Prospr => "prospr",
            Self::Epsd => "epsd",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "magnitude" => Self::Magnitude,
            "snip" => Self::Snip,
            "prospr" => Self::Prospr,
            "epsd" => Self::Epsd,
            _ => bail!(Config, "unknown pruning criterion {s:?}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Element,
    Channel,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "element" => Ok(Self::Element),
            "channel" => Ok(Self::Channel),
            _ => bail!(Config, "unknown granularity {s:?}"),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Element => "element",
            Self::Channel => "channel",
        })
    }
}

/// Normalized nonnegative importance per maskable weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `raw / Σ raw`; uniform when every raw score is zero.
    pub scores: Vec<f64>,
    /// Unnormalized magnitudes, `|∂L/∂m|` or `|θ|`.
    pub raw: Vec<f64>,
    pub criterion: Criterion,
    pub steps_used: usize,
    pub loss_used: String,
}

impl SaliencyMap {
    pub fn from_raw(raw: Vec<f64>, criterion: Criterion, steps_used: usize, loss_used: String) -> Result<Self> {
        if raw.is_empty() {
            bail!(Shape, "saliency over zero weights");
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            bail!(Numerics, "non-finite saliency at weight {i}");
        }
        let raw: Vec<f64> = raw.into_iter().map(f64::abs).collect();
        let total: f64 = raw.iter().sum();
        let scores = if total > 0.0 {
            raw.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / raw.len() as f64; raw.len()]
        };
        Ok(Self { scores, raw, criterion, steps_used, loss_used })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Settings shared by the gradient-based criteria.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyConfig {
    pub steps: usize,
    pub lr: f64,
    pub unroll: UnrollOptions,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self { steps: 3, lr: 0.1, unroll: UnrollOptions::default() }
    }
}

/// `|θ|` over the maskable weights.
pub fn magnitude_saliency(model: &MaskedModel) -> Result<SaliencyMap> {
    let raw = model.effective_params()[..model.num_maskable()].to_vec();
    SaliencyMap::from_raw(raw, Criterion::Magnitude, 0, "none".into())
}

/// `|θ ⊙ ∂L/∂θ|` at the current (masked) weights on `batch`, cross-entropy.
pub fn snip_saliency(model: &MaskedModel, batch: StepBatch, num_examples: usize) -> Result<SaliencyMap> {
    let cfg = SaliencyConfig { steps: 1, ..SaliencyConfig::default() };
    hypergradient_saliency(model, vec![batch], &cfg, &DistillSpec::ce(), Criterion::Snip, num_examples)
}

/// Mask gradient of the cross-entropy after `steps − 1` unrolled updates.
pub fn prospr_saliency(
    model: &MaskedModel,
    batches: Vec<StepBatch>,
    cfg: &SaliencyConfig,
    num_examples: usize,
) -> Result<SaliencyMap> {
    hypergradient_saliency(model, batches, cfg, &DistillSpec::ce(), Criterion::Prospr, num_examples)
}

/// Mask gradient of the self-distillation loss after `steps − 1` unrolled updates.
pub fn epsd_saliency(
    model: &MaskedModel,
    batches: Vec<StepBatch>,
    cfg: &SaliencyConfig,
    spec: &DistillSpec,
    num_examples: usize,
) -> Result<SaliencyMap> {
    if spec.kind == DistillKind::None {
        bail!(Config, "epsd saliency needs a self-distillation loss, got kind none");
    }
    hypergradient_saliency(model, batches, cfg, spec, Criterion::Epsd, num_examples)
}

fn hypergradient_saliency(
    model: &MaskedModel,
    batches: Vec<StepBatch>,
    cfg: &SaliencyConfig,
    spec: &DistillSpec,
    criterion: Criterion,
    num_examples: usize,
) -> Result<SaliencyMap> {
    if batches.len() < cfg.steps {
        bail!(Config, "{} unrolled steps need as many batches, got {}", cfg.steps, batches.len());
    }
    let mut objective = DistillObjective::new(model.layout(), *spec, batches, num_examples)?;
    let mask = model.mask().to_f64();
    let hg = unrolled_hypergradient(
        &mut objective,
        model.params(),
        &mask,
        Some(model.mask().bits()),
        cfg.steps,
        cfg.lr,
        &cfg.unroll,
    )?;
    SaliencyMap::from_raw(hg.mask_grad, criterion, cfg.steps, spec.loss_id())
}

/// Zero count for a sparsity target: `⌈s·N⌉`, with a 1e-9 guard against
/// products such as `0.07·100 = 7.000000000000001`.
pub fn target_zeros(sparsity: f64, n: usize) -> usize {
    ((sparsity * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        bail!(Config, "sparsity must lie in [0, 1), got {sparsity}");
    }
    Ok(())
}

/// Global mask at `sparsity`. See [`build_mask_monotone`].
pub fn build_mask(saliency: &SaliencyMap, layout: &Layout, sparsity: f64, granularity: Granularity) -> Result<Mask> {
    build_mask_monotone(saliency, layout, sparsity, granularity, None)
}

/// Element granularity zeroes exactly `⌈s·N⌉` weights with the lowest raw
/// scores, ties going to the lower flat index. Channel granularity ranks
/// whole channels by summed score and zeroes them, lowest first, until at
/// least `⌈s·N⌉` weights are gone. Weights already pruned in `prior` are
/// removed first, so masks only ever lose entries.
pub fn build_mask_monotone(
    saliency: &SaliencyMap,
    layout: &Layout,
    sparsity: f64,
    granularity: Granularity,
    prior: Option<&Mask>,
) -> Result<Mask> {
    check_sparsity(sparsity)?;
    let n = layout.num_maskable;
    if saliency.len() != n {
        bail!(Shape, "saliency has {} entries, model has {n} maskable weights", saliency.len());
    }
    if let Some(p) = prior {
        if p.len() != n {
            bail!(Shape, "prior mask length {} != {n}", p.len());
        }
    }
    let target = target_zeros(sparsity, n).max(prior.map_or(0, Mask::zeros));
    let pruned_before = |i: usize| prior.is_some_and(|p| !p.kept(i));

    let mask = match granularity {
        Granularity::Element => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                pruned_before(b)
                    .cmp(&pruned_before(a))
                    .then(saliency.raw[a].total_cmp(&saliency.raw[b]))
                    .then(a.cmp(&b))
            });
            let mut bits = vec![true; n];
            for &i in &order[..target] {
                bits[i] = false;
            }
            Mask::from_bools(bits)
        }
        Granularity::Channel => {
            struct Chan {
                layer: usize,
                channel: usize,
                score: f64,
                size: usize,
                forced: bool,
            }
            let mut chans = Vec::new();
            for (li, layer) in layout.layers.iter().enumerate() {
                let mut score = vec![0.0; layer.channels()];
                let mut size = vec![0usize; layer.channels()];
                let mut forced = vec![false; layer.channels()];
                for local in 0..layer.weight_len {
                    let c = layer.channel_of(local);
                    let flat = layer.weight_offset + local;
                    score[c] += saliency.raw[flat];
                    size[c] += 1;
                    forced[c] |= pruned_before(flat);
                }
                for c in 0..layer.channels() {
                    chans.push(Chan { layer: li, channel: c, score: score[c], size: size[c], forced: forced[c] });
                }
            }
            chans.sort_by(|a, b| {
                b.forced
                    .cmp(&a.forced)
                    .then(a.score.total_cmp(&b.score))
                    .then(a.layer.cmp(&b.layer))
                    .then(a.channel.cmp(&b.channel))
            });
            let mut cm = ChannelMask::ones(layout);
            let mut zeros = 0;
            for ch in &chans {
                if zeros >= target && !ch.forced {
                    break;
                }
                cm.layers[ch.layer][ch.channel] = false;
                zeros += ch.size;
            }
            cm.expand(layout)?
        }
    };
    check_collapse(&mask, layout)?;
    Ok(mask)
}

fn check_collapse(mask: &Mask, layout: &Layout) -> Result<()> {
    for (li, layer) in layout.layers.iter().enumerate() {
        if layer.weight_range().all(|i| !mask.kept(i)) {
            bail!(LayerCollapse, "layer {li} would lose all {} weights at sparsity {:.4}", layer.weight_len, mask.sparsity());
        }
    }
    Ok(())
}
