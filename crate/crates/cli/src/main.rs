use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use epsd::data::Split;
use epsd::harness::{emit_plotdata, load_report, run_sweep, ExperimentConfig, PlotKind};
use epsd::metrics::{aurc, ece, loss_surface, mean_jsv, write_calibration_csv, write_surface_csv};
use epsd::model::read_checkpoint;
use epsd::prune::{write_mask_file, write_saliency_csv};
use epsd::train::{evaluate, probe_batch, prune_for_regime};

/// Early pruning with self-distillation: sweeps, masks and metrics.
#[derive(Parser)]
#[command(name = "epsd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (key = value, sections [pruning] [distill] [train] [data]).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Config overrides: `key=value`, `section.key=value` or `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the first (regime, sparsity, seed) cell of the config.
    Run(ConfigArgs),
    /// Run every (regime, sparsity, seed) cell.
    Sweep(ConfigArgs),
    /// Prune only and write the mask and saliency scores.
    Prune(ConfigArgs),
    /// Evaluate a checkpoint on the configured data.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export plot CSVs from a sweep report directory.
    Plotdata {
        #[arg(long)]
        report: PathBuf,
        /// accuracy_vs_sparsity, jsv_curve, surface_contour, risk_coverage or all.
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Turns `--key value` and `--key=value` into `key=value`.
fn normalize(raw: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        match arg.strip_prefix("--") {
            Some(flag) if flag.contains('=') => out.push(flag.to_string()),
            Some(flag) => {
                let value = it.next().with_context(|| format!("flag --{flag} needs a value"))?;
                out.push(format!("{flag}={value}"));
            }
            None if arg.contains('=') => out.push(arg.clone()),
            None => bail!("unexpected argument '{arg}', overrides are key=value"),
        }
    }
    Ok(out)
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let overrides = normalize(&args.overrides)?;
    Ok(match &args.config {
        Some(path) => ExperimentConfig::from_file(path, &overrides)?,
        None => ExperimentConfig::parse("", &overrides)?,
    })
}

fn first_cell(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.regimes.truncate(1);
    cfg.seeds.truncate(1);
    if cfg.regimes[0].prunes() {
        cfg.pruning.sparsities.truncate(1);
    } else {
        cfg.pruning.sparsities = vec![0.0];
    }
    cfg
}

fn sweep(cfg: ExperimentConfig) -> Result<bool> {
    let report = run_sweep(&cfg)?;
    report.write(&cfg.output)?;
    for a in report.aggregates() {
        println!(
            "{:<22} sparsity {:<5} acc {:.4} ± {:.4} ({} ok, {} failed)",
            a.regime.to_string(),
            a.sparsity,
            a.acc_mean,
            a.acc_std,
            a.n_ok,
            a.n_failed
        );
    }
    for c in report.cells.iter().filter(|c| c.outcome.is_err()) {
        eprintln!("failed {}: {}", c.name(), c.outcome.as_ref().unwrap_err());
    }
    println!("report {} written to {}", report.config_hash, cfg.output.display());
    Ok(report.all_ok())
}

fn prune(cfg: ExperimentConfig) -> Result<bool> {
    let cfg = first_cell(cfg);
    let regime = cfg.regimes[0];
    if !regime.prunes() {
        bail!("regime {regime} does not prune");
    }
    let data = cfg.load_dataset()?;
    let rc = cfg.regime_config(cfg.pruning.sparsities[0], cfg.seeds[0], cfg.resolve_arch(&data)?);
    let pruned = prune_for_regime(regime, &rc, &data)?;
    std::fs::create_dir_all(&cfg.output)?;
    let mask_path = cfg.output.join("mask.epsm");
    write_mask_file(pruned.model.mask(), File::create(&mask_path)?)?;
    if let Some(s) = &pruned.saliency {
        write_saliency_csv(s, pruned.model.layout(), File::create(cfg.output.join("saliency.csv"))?)?;
    }
    println!(
        "{} of {} weights pruned ({:.4}); mask written to {}",
        pruned.model.mask().zeros(),
        pruned.model.num_maskable(),
        pruned.model.mask().sparsity(),
        mask_path.display()
    );
    Ok(true)
}

fn analyze(checkpoint: &Path, cfg: ExperimentConfig) -> Result<bool> {
    let model = read_checkpoint(File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?)?;
    let data = cfg.load_dataset()?;
    let (acc, records) = evaluate(&model, &data, Split::Test)?;
    println!("sparsity {}", model.mask().sparsity());
    println!("test_acc {acc}");
    println!("ece {} ({} bins)", ece(&records, cfg.train.ece_bins)?, cfg.train.ece_bins);
    println!("aurc {}", aurc(&records)?);
    println!("mean_jsv {}", mean_jsv(&model, &probe_batch(&data, cfg.train.jsv_batch)?)?);
    std::fs::create_dir_all(&cfg.output)?;
    write_calibration_csv(&records, File::create(cfg.output.join("calibration.csv"))?)?;
    if cfg.train.surface_grid > 0 {
        let mut idx = data.indices(Split::Test);
        idx.truncate(256);
        let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
        let grid = loss_surface(&model, &data.batch_tensor(&idx)?, &labels, cfg.train.surface_grid, cfg.train.surface_span, 0)?;
        write_surface_csv(&grid, File::create(cfg.output.join("surface.csv"))?)?;
    }
    Ok(true)
}

fn plotdata(report: &Path, kind: &str, out: Option<PathBuf>) -> Result<bool> {
    let loaded = load_report(report)?;
    let kinds = if kind == "all" { PlotKind::ALL.to_vec() } else { vec![kind.parse()?] };
    let out = out.unwrap_or_else(|| report.join("plots"));
    let mut ok = true;
    for k in kinds {
        match emit_plotdata(&loaded, k, &out) {
            Ok(paths) => paths.iter().for_each(|p| println!("{}", p.display())),
            Err(e) if kind == "all" => {
                eprintln!("skipping {k}: {e}");
                ok = false;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => load_config(args).and_then(|c| sweep(first_cell(c))),
        Command::Sweep(args) => load_config(args).and_then(sweep),
        Command::Prune(args) => load_config(args).and_then(prune),
        Command::Analyze { checkpoint, config } => load_config(config).and_then(|c| analyze(checkpoint, c)),
        Command::Plotdata { report, kind, out } => plotdata(report, kind, out.clone()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
