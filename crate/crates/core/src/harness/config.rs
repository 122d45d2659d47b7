//! Plain-text experiment configuration.
//!
//! ```text
//! preset = desk
//! regime = epsd, simple_combination
//! seeds = 0, 1, 2
//!
//! [pruning]
//! sparsity = 0.36, 0.59, 0.79, 0.90, 0.95
//!
//! [distill]
//! method = cskd
//! temperature = 4
//! ```
//!
//! Keys before the first section header, and overrides, may name any key
//! either bare (`temperature`) or qualified (`distill.temperature`). Inside a
//! section a key must belong to that section.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{load_cifar_bin, load_idx, make_synthetic, Dataset, Split, Synthetic};
use crate::distill::{AlphaSchedule, DistillKind, DistillSpec};
use crate::error::{bail, Error, Result};
use crate::model::Arch;
use crate::prune::{Criterion, Granularity, SaliencyConfig};
use crate::tensor::unroll::UnrollOptions;
use crate::train::{PruneStage, ProbeConfig, Regime, RegimeConfig, TrainSchedule};

pub const PRESETS: [&str; 4] = ["desk", "cifar-cskd", "cifar-pskd", "cifar-dlb"];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Gaussians,
    Spirals,
    Idx,
    Cifar,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussians" => Self::Gaussians,
            "spirals" => Self::Spirals,
            "idx" => Self::Idx,
            "cifar" => Self::Cifar,
            other => bail!(Config, "unknown data source '{other}'"),
        })
    }
}

impl DataSource {
    fn name(&self) -> &'static str {
        match self {
            Self::Gaussians => "gaussians",
            Self::Spirals => "spirals",
            Self::Idx => "idx",
            Self::Cifar => "cifar",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub samples_per_class: usize,
    pub noise: f64,
    pub turns: f64,
    pub data_seed: u64,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub train_file: String,
    pub test_file: String,
    /// Examples kept per split (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningConfig {
    pub sparsities: Vec<f64>,
    pub criterion: Criterion,
    pub granularity: Granularity,
    pub iteration_steps: usize,
    pub iteration_lr: f64,
    pub per_class: usize,
    pub new_batch: Option<bool>,
    pub iterative: bool,
    pub rounds: usize,
    pub recovery_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub pretrain_epochs: usize,
    pub ece_bins: usize,
    pub jsv_steps: usize,
    pub jsv_batch: usize,
    /// Loss-surface grid size per cell (0 disables).
    pub surface_grid: usize,
    pub surface_span: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: String,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// `auto` or an architecture descriptor such as `mlp:8-64-64-4`.
    pub arch: String,
    /// Hidden widths used when `arch = auto`.
    pub hidden: Vec<usize>,
    pub pruning: PruningConfig,
    pub distill: DistillSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
}

const SECTIONS: [&str; 5] = ["", "pruning", "distill", "train", "data"];

/// `(section, key)` in echo order.
const KEYS: &[(&str, &str)] = &[
    ("", "preset"),
    ("", "regime"),
    ("", "seeds"),
    ("", "output"),
    ("", "arch"),
    ("", "hidden"),
    ("pruning", "sparsity"),
    ("pruning", "criterion"),
    ("pruning", "granularity"),
    ("pruning", "iteration_steps"),
    ("pruning", "iteration_lr"),
    ("pruning", "per_class"),
    ("pruning", "new_batch"),
    ("pruning", "schedule"),
    ("pruning", "rounds"),
    ("pruning", "recovery_epochs"),
    ("distill", "method"),
    ("distill", "temperature"),
    ("distill", "alpha"),
    ("distill", "lambda_cls"),
    ("distill", "alpha_schedule"),
    ("distill", "alpha_target"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "lr"),
    ("train", "momentum"),
    ("train", "nesterov"),
    ("train", "weight_decay"),
    ("train", "lr_drops"),
    ("train", "drop_factor"),
    ("train", "pretrain_epochs"),
    ("train", "ece_bins"),
    ("train", "jsv_steps"),
    ("train", "jsv_batch"),
    ("train", "surface_grid"),
    ("train", "surface_span"),
    ("data", "source"),
    ("data", "classes"),
    ("data", "dim"),
    ("data", "separation"),
    ("data", "samples_per_class"),
    ("data", "noise"),
    ("data", "turns"),
    ("data", "data_seed"),
    ("data", "train_images"),
    ("data", "train_labels"),
    ("data", "test_images"),
    ("data", "test_labels"),
    ("data", "train_file"),
    ("data", "test_file"),
    ("data", "train_limit"),
    ("data", "test_limit"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let v = v.trim().trim_start_matches('[').trim_end_matches(']');
    v.split(',').map(str::trim).filter(|p| !p.is_empty()).map(|p| parse(key, p)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!(Config, "invalid value '{v}' for key '{key}', expected true or false"),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

/// Finds the canonical `(section, key)` for `name` as written in `section`.
fn resolve(section: &str, name: &str) -> Result<(&'static str, &'static str)> {
    let (sec, key) = match name.split_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, name),
    };
    let found = KEYS.iter().find(|(s, k)| *k == key && sec.is_none_or(|want| want == *s));
    match found {
        Some(&(s, k)) if section.is_empty() || s == section => Ok((s, k)),
        Some(&(s, _)) => bail!(Config, "key '{name}' belongs to section [{s}], not [{section}]"),
        None => bail!(Config, "unknown key '{name}'"),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset exists")
    }
}

impl ExperimentConfig {
    /// Built-in defaults. `desk` runs in minutes on a laptop; the `cifar-*`
    /// presets carry the CIFAR-10 hyperparameters of each self-distillation
    /// method for runs on real data.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self {
            preset: "desk".into(),
            regimes: vec![Regime::Epsd],
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs/desk"),
            arch: "auto".into(),
            hidden: vec![64, 64],
            pruning: PruningConfig {
                sparsities: vec![0.36, 0.59, 0.79, 0.9, 0.95],
                criterion: Criterion::Prospr,
                granularity: Granularity::Element,
                iteration_steps: 3,
                iteration_lr: 0.1,
                per_class: 10,
                new_batch: None,
                iterative: false,
                rounds: 7,
                recovery_epochs: 2,
            },
            distill: DistillSpec { kind: DistillKind::Dlb, ..DistillSpec::default() },
            train: TrainConfig {
                schedule: TrainSchedule::default(),
                pretrain_epochs: 10,
                ece_bins: 15,
                jsv_steps: 0,
                jsv_batch: 32,
                surface_grid: 0,
                surface_span: 1.0,
            },
            data: DataConfig {
                source: DataSource::Spirals,
                classes: 4,
                dim: 8,
                separation: 3.0,
                samples_per_class: 150,
                noise: 0.05,
                turns: 1.0,
                data_seed: 0,
                train_images: String::new(),
                train_labels: String::new(),
                test_images: String::new(),
                test_labels: String::new(),
                train_file: String::new(),
                test_file: String::new(),
                train_limit: 0,
                test_limit: 0,
            },
        };
        let cifar = |kind: DistillKind, tau: f64, schedule: TrainSchedule| {
            let mut c = desk.clone();
            c.preset = format!("cifar-{kind}");
            c.output = PathBuf::from(format!("runs/cifar-{kind}"));
            c.arch = "cnn:in=3x32x32;conv=16k3p1,32k3p1;hidden=128;classes=10".into();
            c.seeds = vec![0, 1, 2];
            c.distill = DistillSpec { kind, tau, ..DistillSpec::default() };
            c.train.schedule = schedule;
            c.data.source = DataSource::Cifar;
            c.data.train_file = "data/cifar-10-batches-bin/data_batch_1.bin".into();
            c.data.test_file = "data/cifar-10-batches-bin/test_batch.bin".into();
            c
        };
        let sched = |epochs, batch_size, lr, drops: &[usize], wd| TrainSchedule {
            epochs,
            batch_size,
            lr,
            momentum: 0.9,
            nesterov: true,
            weight_decay: wd,
            lr_drop_epochs: drops.to_vec(),
            drop_factor: 0.1,
        };
        Ok(match name {
            "desk" => desk,
            "cifar-cskd" => cifar(DistillKind::Cskd, 4.0, sched(200, 128, 0.1, &[100, 150], 1e-4)),
            "cifar-pskd" => {
                let mut c = cifar(DistillKind::Pskd, 4.0, sched(300, 128, 0.1, &[150, 225], 5e-4));
                c.pruning.new_batch = Some(false);
                c
            }
            "cifar-dlb" => cifar(DistillKind::Dlb, 3.0, sched(240, 64, 0.05, &[150, 180, 210], 5e-4)),
            other => bail!(Config, "unknown preset '{other}' (known: {})", PRESETS.join(", ")),
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pruning;
        let d = &mut self.distill;
        let t = &mut self.train;
        let s = &mut t.schedule;
        let data = &mut self.data;
        match key {
            "preset" => self.preset = v.to_string(),
            "regime" => self.regimes = parse_list(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "arch" => {
                if v != "auto" {
                    v.parse::<Arch>()?;
                }
                self.arch = v.to_string();
            }
            "hidden" => self.hidden = parse_list(key, v)?,
            "sparsity" => p.sparsities = parse_list(key, v)?,
            "criterion" => p.criterion = v.parse()?,
            "granularity" => p.granularity = v.parse()?,
            "iteration_steps" => p.iteration_steps = parse(key, v)?,
            "iteration_lr" => p.iteration_lr = parse(key, v)?,
            "per_class" => p.per_class = parse(key, v)?,
            "new_batch" => p.new_batch = if v == "auto" { None } else { Some(parse_bool(key, v)?) },
            "schedule" => {
                p.iterative = match v {
                    "oneshot" => false,
                    "iterative" => true,
                    _ => bail!(Config, "invalid value '{v}' for key 'schedule', expected oneshot or iterative"),
                }
            }
            "rounds" => p.rounds = parse(key, v)?,
            "recovery_epochs" => p.recovery_epochs = parse(key, v)?,
            "method" => d.kind = v.parse()?,
            "temperature" => d.tau = parse(key, v)?,
            "alpha" => d.alpha = parse(key, v)?,
            "lambda_cls" => d.lambda_cls = parse(key, v)?,
            "alpha_schedule" | "alpha_target" => {
                let (kind, target) = match d.alpha_schedule {
                    AlphaSchedule::Fixed(x) => ("fixed", x),
                    AlphaSchedule::LinearGrowth(x) => ("linear", x),
                };
                let (kind, target) = if key == "alpha_schedule" { (v, target) } else { (kind, parse(key, v)?) };
                d.alpha_schedule = match kind {
                    "fixed" => AlphaSchedule::Fixed(target),
                    "linear" => AlphaSchedule::LinearGrowth(target),
                    _ => bail!(Config, "invalid value '{v}' for key 'alpha_schedule', expected fixed or linear"),
                };
            }
            "epochs" => s.epochs = parse(key, v)?,
            "batch_size" => s.batch_size = parse(key, v)?,
            "lr" => s.lr = parse(key, v)?,
            "momentum" => s.momentum = parse(key, v)?,
            "nesterov" => s.nesterov = parse_bool(key, v)?,
            "weight_decay" => s.weight_decay = parse(key, v)?,
            "lr_drops" => s.lr_drop_epochs = parse_list(key, v)?,
            "drop_factor" => s.drop_factor = parse(key, v)?,
            "pretrain_epochs" => t.pretrain_epochs = parse(key, v)?,
            "ece_bins" => t.ece_bins = parse(key, v)?,
            "jsv_steps" => t.jsv_steps = parse(key, v)?,
            "jsv_batch" => t.jsv_batch = parse(key, v)?,
            "surface_grid" => t.surface_grid = parse(key, v)?,
            "surface_span" => t.surface_span = parse(key, v)?,
            "source" => data.source = v.parse()?,
            "classes" => data.classes = parse(key, v)?,
            "dim" => data.dim = parse(key, v)?,
            "separation" => data.separation = parse(key, v)?,
            "samples_per_class" => data.samples_per_class = parse(key, v)?,
            "noise" => data.noise = parse(key, v)?,
            "turns" => data.turns = parse(key, v)?,
            "data_seed" => data.data_seed = parse(key, v)?,
            "train_images" => data.train_images = v.to_string(),
            "train_labels" => data.train_labels = v.to_string(),
            "test_images" => data.test_images = v.to_string(),
            "test_labels" => data.test_labels = v.to_string(),
            "train_file" => data.train_file = v.to_string(),
            "test_file" => data.test_file = v.to_string(),
            "train_limit" => data.train_limit = parse(key, v)?,
            "test_limit" => data.test_limit = parse(key, v)?,
            other => bail!(Config, "unknown key '{other}'"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let p = &self.pruning;
        let d = &self.distill;
        let t = &self.train;
        let s = &t.schedule;
        let data = &self.data;
        match key {
            "preset" => self.preset.clone(),
            "regime" => join(&self.regimes),
            "seeds" => join(&self.seeds),
            "output" => self.output.display().to_string(),
            "arch" => self.arch.clone(),
            "hidden" => join(&self.hidden),
            "sparsity" => join(&p.sparsities),
            "criterion" => p.criterion.to_string(),
            "granularity" => p.granularity.to_string(),
            "iteration_steps" => p.iteration_steps.to_string(),
            "iteration_lr" => p.iteration_lr.to_string(),
            "per_class" => p.per_class.to_string(),
            "new_batch" => p.new_batch.map_or("auto".into(), |b| b.to_string()),
            "schedule" => if p.iterative { "iterative" } else { "oneshot" }.into(),
            "rounds" => p.rounds.to_string(),
            "recovery_epochs" => p.recovery_epochs.to_string(),
            "method" => d.kind.to_string(),
            "temperature" => d.tau.to_string(),
            "alpha" => d.alpha.to_string(),
            "lambda_cls" => d.lambda_cls.to_string(),
            "alpha_schedule" => match d.alpha_schedule {
                AlphaSchedule::Fixed(_) => "fixed".into(),
                AlphaSchedule::LinearGrowth(_) => "linear".into(),
            },
            "alpha_target" => match d.alpha_schedule {
                AlphaSchedule::Fixed(x) | AlphaSchedule::LinearGrowth(x) => x.to_string(),
            },
            "epochs" => s.epochs.to_string(),
            "batch_size" => s.batch_size.to_string(),
            "lr" => s.lr.to_string(),
            "momentum" => s.momentum.to_string(),
            "nesterov" => s.nesterov.to_string(),
            "weight_decay" => s.weight_decay.to_string(),
            "lr_drops" => join(&s.lr_drop_epochs),
            "drop_factor" => s.drop_factor.to_string(),
            "pretrain_epochs" => t.pretrain_epochs.to_string(),
            "ece_bins" => t.ece_bins.to_string(),
            "jsv_steps" => t.jsv_steps.to_string(),
            "jsv_batch" => t.jsv_batch.to_string(),
            "surface_grid" => t.surface_grid.to_string(),
            "surface_span" => t.surface_span.to_string(),
            "source" => data.source.name().into(),
            "classes" => data.classes.to_string(),
            "dim" => data.dim.to_string(),
            "separation" => data.separation.to_string(),
            "samples_per_class" => data.samples_per_class.to_string(),
            "noise" => data.noise.to_string(),
            "turns" => data.turns.to_string(),
            "data_seed" => data.data_seed.to_string(),
            "train_images" => data.train_images.clone(),
            "train_labels" => data.train_labels.clone(),
            "test_images" => data.test_images.clone(),
            "test_labels" => data.test_labels.clone(),
            "train_file" => data.train_file.clone(),
            "test_file" => data.test_file.clone(),
            "train_limit" => data.train_limit.to_string(),
            "test_limit" => data.test_limit.to_string(),
            other => unreachable!("key table and getter disagree on '{other}'"),
        }
    }

    /// Parses config text, then applies `overrides` (`key=value`) on top.
    /// The preset, wherever it is named, is applied before any other key.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut entries: Vec<(&'static str, String)> = Vec::new();
        let mut section = "";
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match SECTIONS.iter().find(|s| **s == name.trim() && !s.is_empty()) {
                    Some(s) => s,
                    None => bail!(Config, "line {}: unknown section [{name}]", n + 1),
                };
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value, got '{line}'", n + 1);
            };
            entries.push((resolve(section, k.trim())?.1, v.trim().to_string()));
        }
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!(Config, "override '{o}' is not key=value");
            };
            entries.push((resolve("", k.trim())?.1, v.trim().to_string()));
        }
        let preset = entries.iter().rev().find(|(k, _)| *k == "preset").map_or("desk", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &entries {
            if *k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            bail!(Config, "no regime given");
        }
        if self.seeds.is_empty() {
            bail!(Config, "no seed given");
        }
        if self.pruning.sparsities.is_empty() {
            bail!(Config, "no sparsity given");
        }
        if let Some(s) = self.pruning.sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
            bail!(Config, "sparsity must lie in [0, 1), got {s}");
        }
        let max = self.pruning.sparsities.iter().copied().fold(0.0, f64::max);
        if max > 0.0 && !self.regimes.iter().any(|r| r.prunes()) {
            bail!(Config, "regimes {} do not prune but sparsity {max} was requested", join(&self.regimes));
        }
        for &regime in &self.regimes {
            for &s in &self.cell_sparsities(regime) {
                // The real architecture is only known once data is loaded.
                self.regime_config(s, self.seeds[0], Arch::Mlp(vec![1, 2])).check(regime)?;
            }
        }
        if self.train.surface_grid > 0 && self.train.surface_grid.is_multiple_of(2) {
            bail!(Config, "surface_grid must be odd, got {}", self.train.surface_grid);
        }
        if self.train.ece_bins == 0 {
            bail!(Config, "ece_bins must be positive");
        }
        Ok(())
    }

    /// Sparsities at which `regime` runs: the sweep list, or 0 for regimes that do not prune.
    pub fn cell_sparsities(&self, regime: Regime) -> Vec<f64> {
        if regime.prunes() {
            self.pruning.sparsities.clone()
        } else {
            vec![0.0]
        }
    }

    pub fn regime_config(&self, sparsity: f64, seed: u64, arch: Arch) -> RegimeConfig {
        let p = &self.pruning;
        RegimeConfig {
            arch,
            sparsity,
            granularity: p.granularity,
            ce_criterion: p.criterion,
            saliency: SaliencyConfig { steps: p.iteration_steps, lr: p.iteration_lr, unroll: UnrollOptions::default() },
            per_class: p.per_class,
            new_batch_per_step: p.new_batch,
            stage: if p.iterative {
                PruneStage::Iterative { rounds: p.rounds, recovery_epochs: p.recovery_epochs }
            } else {
                PruneStage::OneShot
            },
            distill: self.distill,
            train: self.train.schedule.clone(),
            pretrain_epochs: self.train.pretrain_epochs,
            probes: ProbeConfig {
                ece_bins: self.train.ece_bins,
                eval_every_epoch: true,
                jsv_steps: self.train.jsv_steps,
                jsv_batch: self.train.jsv_batch,
            },
            seed,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let need = |v: &str, key: &str| -> Result<()> {
            if v.is_empty() {
                bail!(Config, "data source {} needs key '{key}'", d.source.name());
            }
            Ok(())
        };
        let data = match d.source {
            DataSource::Gaussians => make_synthetic(
                &Synthetic::Gaussians {
                    classes: d.classes,
                    dim: d.dim,
                    separation: d.separation,
                    per_class: d.samples_per_class,
                },
                d.data_seed,
            )?,
            DataSource::Spirals => make_synthetic(
                &Synthetic::Spirals { classes: d.classes, per_class: d.samples_per_class, noise: d.noise, turns: d.turns },
                d.data_seed,
            )?,
            DataSource::Idx => {
                for (v, k) in [
                    (&d.train_images, "train_images"),
                    (&d.train_labels, "train_labels"),
                    (&d.test_images, "test_images"),
                    (&d.test_labels, "test_labels"),
                ] {
                    need(v, k)?;
                }
                load_idx(&d.train_images, &d.train_labels, Split::Train)?.concat(load_idx(
                    &d.test_images,
                    &d.test_labels,
                    Split::Test,
                )?)?
            }
            DataSource::Cifar => {
                need(&d.train_file, "train_file")?;
                need(&d.test_file, "test_file")?;
                load_cifar_bin(&d.train_file, Split::Train)?.concat(load_cifar_bin(&d.test_file, Split::Test)?)?
            }
        };
        if d.train_limit > 0 || d.test_limit > 0 {
            let cap = |n: usize| if n == 0 { usize::MAX } else { n };
            return data.truncate_per_split(cap(d.train_limit), cap(d.test_limit));
        }
        Ok(data)
    }

    /// The configured architecture, or an MLP sized to `data` when `arch = auto`.
    pub fn resolve_arch(&self, data: &Dataset) -> Result<Arch> {
        let arch = if self.arch == "auto" {
            let mut widths = vec![data.feature_numel()];
            widths.extend(&self.hidden);
            widths.push(data.classes());
            Arch::Mlp(widths)
        } else {
            self.arch.parse()?
        };
        arch.validate()?;
        if arch.classes() != data.classes() {
            bail!(Config, "architecture has {} outputs, data has {} classes", arch.classes(), data.classes());
        }
        Ok(arch)
    }

    /// Canonical text form; parsing it yields this config again.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for section in SECTIONS {
            if !section.is_empty() {
                let _ = writeln!(out, "\n[{section}]");
            }
            for (_, key) in KEYS.iter().filter(|(s, _)| *s == section) {
                let _ = writeln!(out, "{key} = {}", self.get(key));
            }
        }
        out
    }

    /// First 12 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("", &[]).unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::parse("# nothing\n\n", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn temperature_key() {
        let c = ExperimentConfig::parse("[distill]\ntemperature=3\n", &[]).unwrap();
        assert_eq!(c.distill.tau, 3.0);
        let c = ExperimentConfig::parse("temperature = 3", &[]).unwrap();
        assert_eq!(c.distill.tau, 3.0);
    }

    #[test]
    fn bad_keys_and_values() {
        let err = ExperimentConfig::parse("[train]\nlearning_rat = 0.1", &[]).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
        assert!(ExperimentConfig::parse("[data]\ntemperature = 3", &[]).is_err());
        assert!(ExperimentConfig::parse("[pruning]\nsparsity = 1.0", &[]).is_err());
        assert!(ExperimentConfig::parse("[bogus]\n", &[]).is_err());
        assert!(ExperimentConfig::parse("lr = fast", &[]).is_err());
    }

    #[test]
    fn contradictions() {
        assert!(ExperimentConfig::parse("regime = unpruned\nsparsity = 0.5", &[]).is_err());
        assert!(ExperimentConfig::parse("regime = unpruned\nsparsity = 0", &[]).is_ok());
        assert!(ExperimentConfig::parse("regime = unpruned, epsd\nsparsity = 0.5", &[]).is_ok());
        assert!(ExperimentConfig::parse("regime = epsd\nmethod = none", &[]).is_err());
    }

    #[test]
    fn overrides_win_and_presets_load() {
        let c = ExperimentConfig::parse("[train]\nepochs = 28", &["epochs=29".into(), "distill.alpha=0.2".into()]).unwrap();
        assert_eq!(c.train.schedule.epochs, 29);
        assert_eq!(c.distill.alpha, 0.2);
        let dlb = ExperimentConfig::parse("preset = cifar-dlb", &[]).unwrap();
        assert_eq!(dlb.distill.tau, 3.0);
        assert_eq!(dlb.train.schedule.lr_drop_epochs, vec![150, 180, 210]);
        let pskd = ExperimentConfig::parse("", &["preset=cifar-pskd".into()]).unwrap();
        assert_eq!(pskd.pruning.new_batch, Some(false));
        assert_eq!(pskd.pruning.iteration_steps, 3);
        assert!(ExperimentConfig::parse("preset = huge", &[]).is_err());
    }

    #[test]
    fn text_round_trips() {
        for name in PRESETS {
            let mut c = ExperimentConfig::preset(name).unwrap();
            c.regimes = vec![Regime::Epsd, "ablation:sd:ce".parse().unwrap()];
            c.distill.alpha_schedule = AlphaSchedule::Fixed(0.3);
            c.train.schedule.lr = 0.1 + 0.2;
            let back = ExperimentConfig::parse(&c.to_text(), &[]).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::parse("", &["seeds=0".into()]).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn auto_arch_matches_data() {
        let c = ExperimentConfig::default();
        let d = c.load_dataset().unwrap();
        assert_eq!(c.resolve_arch(&d).unwrap(), Arch::Mlp(vec![2, 64, 64, 4]));
    }
}
