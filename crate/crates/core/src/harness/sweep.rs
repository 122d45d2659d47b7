//! Regime × sparsity × seed sweeps and their on-disk report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use super::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::error::{bail, Error, Result};
use crate::metrics::{loss_surface, write_calibration_csv, write_surface_csv, CalibrationRecord, SurfaceGrid};
use crate::model::write_checkpoint;
use crate::prune::write_mask_file;
use crate::train::{run_regime, Regime, RegimeReport};

pub const WORKERS_ENV: &str = "EPSD_WORKERS";

pub const SUMMARY_HEADER: &str =
    "regime,target_sparsity,seed,status,test_acc,sparsity,ece,aurc,mean_jsv,jsv_early,prune_loss,train_loss,error";
pub const AGGREGATE_HEADER: &str =
    "regime,target_sparsity,n_ok,n_failed,acc_mean,acc_std,ece_mean,aurc_mean,mean_jsv_mean,jsv_early_mean";

/// Metrics of a successful cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub test_acc: f64,
    pub sparsity: f64,
    pub ece: f64,
    pub aurc: f64,
    pub mean_jsv: f64,
    /// Mean of the per-step Mean-JSV probes, when any were logged.
    pub jsv_early: Option<f64>,
    pub jsv_trace: Vec<(usize, f64)>,
    pub prune_loss: Option<String>,
    pub train_loss: String,
    pub records: Vec<CalibrationRecord>,
    pub surface: Option<SurfaceGrid>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub regime: Regime,
    pub sparsity: f64,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
    pub runtime_secs: f64,
    /// Full run output; absent for failed cells and reloaded reports.
    pub run: Option<Box<RegimeReport>>,
}

impl CellResult {
    pub fn name(&self) -> String {
        cell_name(self.regime, self.sparsity, self.seed)
    }

    pub fn metrics(&self) -> Option<&CellMetrics> {
        self.outcome.as_ref().ok()
    }
}

pub fn cell_name(regime: Regime, sparsity: f64, seed: u64) -> String {
    format!("{}_s{sparsity}_seed{seed}", regime.to_string().replace(':', "-"))
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub cells: Vec<CellResult>,
}

/// Seed-mean summary of one (regime, sparsity) group.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub regime: Regime,
    pub sparsity: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub ece_mean: f64,
    pub aurc_mean: f64,
    pub mean_jsv_mean: f64,
    pub jsv_early_mean: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_ok())
    }

    /// Groups in sweep order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(Regime, f64)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|&(r, s)| r == c.regime && s == c.sparsity) {
                keys.push((c.regime, c.sparsity));
            }
        }
        keys.into_iter()
            .map(|(regime, sparsity)| {
                let group: Vec<&CellResult> =
                    self.cells.iter().filter(|c| c.regime == regime && c.sparsity == sparsity).collect();
                let ok: Vec<&CellMetrics> = group.iter().filter_map(|c| c.metrics()).collect();
                let col = |f: fn(&CellMetrics) -> f64| ok.iter().map(|m| f(m)).collect::<Vec<f64>>();
                let acc = col(|m| m.test_acc);
                let early: Vec<f64> = ok.iter().filter_map(|m| m.jsv_early).collect();
                Aggregate {
                    regime,
                    sparsity,
                    n_ok: ok.len(),
                    n_failed: group.len() - ok.len(),
                    acc_mean: mean(&acc),
                    acc_std: std_dev(&acc),
                    ece_mean: mean(&col(|m| m.ece)),
                    aurc_mean: mean(&col(|m| m.aurc)),
                    mean_jsv_mean: mean(&col(|m| m.mean_jsv)),
                    jsv_early_mean: (!early.is_empty() && early.len() == ok.len()).then(|| mean(&early)),
                }
            })
            .collect()
    }

    pub fn aggregate(&self, regime: Regime, sparsity: f64) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.regime == regime && a.sparsity == sparsity)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for c in &self.cells {
            let _ = match &c.outcome {
                Ok(m) => writeln!(
                    s,
                    "{},{},{},ok,{},{},{},{},{},{},{},{},",
                    c.regime,
                    c.sparsity,
                    c.seed,
                    m.test_acc,
                    m.sparsity,
                    m.ece,
                    m.aurc,
                    m.mean_jsv,
                    opt(m.jsv_early),
                    m.prune_loss.as_deref().unwrap_or(""),
                    m.train_loss
                ),
                Err(e) => writeln!(s, "{},{},{},failed,,,,,,,,,{}", c.regime, c.sparsity, c.seed, csv_field(e)),
            };
        }
        s
    }

    pub fn aggregate_csv(&self) -> String {
        let mut s = format!("{AGGREGATE_HEADER}\n");
        for a in self.aggregates() {
            let ok = a.n_ok > 0;
            let v = |x: f64| if ok { x.to_string() } else { String::new() };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                a.regime,
                a.sparsity,
                a.n_ok,
                a.n_failed,
                v(a.acc_mean),
                v(a.acc_std),
                v(a.ece_mean),
                v(a.aurc_mean),
                v(a.mean_jsv_mean),
                opt(a.jsv_early_mean)
            );
        }
        s
    }

    /// Resolved config with its hash; parsing the body reproduces the config.
    pub fn config_echo(&self) -> String {
        format!("# config {}\n{}", self.config_hash, self.config.to_text())
    }

    /// Writes `config.txt`, `summary.csv`, `aggregate.csv`, `timing.csv` and
    /// one directory per cell under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.config_echo())?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("aggregate.csv"), self.aggregate_csv())?;
        let mut timing = String::from("cell,runtime_secs\n");
        for c in &self.cells {
            let _ = writeln!(timing, "{},{:.3}", c.name(), c.runtime_secs);
        }
        fs::write(dir.join("timing.csv"), timing)?;
        for c in &self.cells {
            let cell_dir = dir.join("cells").join(c.name());
            fs::create_dir_all(&cell_dir)?;
            match (&c.outcome, &c.run) {
                (Err(e), _) => fs::write(cell_dir.join("error.txt"), format!("{e}\n"))?,
                (Ok(m), run) => {
                    write_calibration_csv(&m.records, fs::File::create(cell_dir.join("calibration.csv"))?)?;
                    if let Some(grid) = &m.surface {
                        write_surface_csv(grid, fs::File::create(cell_dir.join("surface.csv"))?)?;
                    }
                    if let Some(run) = run {
                        run.log.write_csv(fs::File::create(cell_dir.join("metrics.csv"))?)?;
                        write_checkpoint(&run.model, fs::File::create(cell_dir.join("model.ckpt"))?)?;
                        write_mask_file(run.model.mask(), fs::File::create(cell_dir.join("mask.epsm"))?)?;
                        let mut rounds = String::from("round,target_sparsity,sparsity,zeros,loss_used\n");
                        for r in &run.rounds {
                            let _ = writeln!(
                                rounds,
                                "{},{},{},{},{}",
                                r.round, r.target_sparsity, r.sparsity, r.zeros, r.loss_used
                            );
                        }
                        fs::write(cell_dir.join("rounds.csv"), rounds)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Worker count from `EPSD_WORKERS`, defaulting to the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_cell(cfg: &ExperimentConfig, data: &Dataset, regime: Regime, sparsity: f64, seed: u64) -> CellResult {
    let start = Instant::now();
    let result = (|| -> Result<(CellMetrics, RegimeReport)> {
        let arch = cfg.resolve_arch(data)?;
        let rc = cfg.regime_config(sparsity, seed, arch);
        let run = run_regime(regime, &rc, data)?;
        let trace = run.log.jsv_trace();
        let surface = if cfg.train.surface_grid > 0 {
            let mut idx = data.indices(Split::Test);
            idx.truncate(256);
            let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
            let x = data.batch_tensor(&idx)?;
            Some(loss_surface(&run.model, &x, &labels, cfg.train.surface_grid, cfg.train.surface_span, seed)?)
        } else {
            None
        };
        let metrics = CellMetrics {
            test_acc: run.test_acc,
            sparsity: run.sparsity,
            ece: run.ece,
            aurc: run.aurc,
            mean_jsv: run.mean_jsv,
            jsv_early: (!trace.is_empty()).then(|| mean(&trace.iter().map(|t| t.1).collect::<Vec<_>>())),
            jsv_trace: trace,
            prune_loss: run.prune_loss.clone(),
            train_loss: run.train_loss.clone(),
            records: run.records.clone(),
            surface,
        };
        Ok((metrics, run))
    })();
    let runtime_secs = start.elapsed().as_secs_f64();
    let (outcome, run) = match result {
        Ok((m, r)) => (Ok(m), Some(Box::new(r))),
        Err(e) => {
            warn!("cell {} failed: {e}", cell_name(regime, sparsity, seed));
            (Err(e.to_string()), None)
        }
    };
    CellResult { regime, sparsity, seed, outcome, runtime_secs, run }
}

/// Every (regime, sparsity, seed) cell in sweep order.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<(Regime, f64, u64)> {
    let mut cells = Vec::new();
    for &regime in &cfg.regimes {
        for s in cfg.cell_sparsities(regime) {
            for &seed in &cfg.seeds {
                cells.push((regime, s, seed));
            }
        }
    }
    cells
}

/// Runs every cell on `data`; failed cells are recorded and the sweep continues.
pub fn run_sweep_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<SweepReport> {
    cfg.validate()?;
    let cells = sweep_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    info!("running {} cells on {} workers", cells.len(), pool.current_num_threads());
    let results = pool.install(|| {
        cells.par_iter().map(|&(regime, s, seed)| run_cell(cfg, data, regime, s, seed)).collect::<Vec<_>>()
    });
    Ok(SweepReport { config: cfg.clone(), config_hash: cfg.hash(), cells: results })
}

/// Loads the configured dataset and runs the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let data = cfg.load_dataset()?;
    run_sweep_on(cfg, &data)
}

fn num<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Report(format!("bad {what} value '{field}'")))
}

fn read_csv(path: &Path) -> Result<Option<Vec<Vec<String>>>> {
    let mut reader = match csv::ReaderBuilder::new().flexible(true).from_path(path) {
        Ok(r) => r,
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound) => {
            return Ok(None)
        }
        Err(e) => bail!(Report, "cannot read {}: {e}", path.display()),
    };
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(|e| Error::Report(format!("bad csv in {}: {e}", path.display())))?;
    Ok(Some(rows))
}

/// Reads a report written by [`SweepReport::write`]. Checkpoints are not
/// loaded; cells carry their metrics, calibration records, JSV traces and
/// surfaces.
pub fn load_report(dir: &Path) -> Result<SweepReport> {
    let text = fs::read_to_string(dir.join("config.txt"))
        .map_err(|e| Error::Report(format!("{} is not a sweep report: {e}", dir.display())))?;
    let config = ExperimentConfig::parse(&text, &[])?;
    let Some(rows) = read_csv(&dir.join("summary.csv"))? else {
        bail!(Report, "{} has no summary.csv", dir.display());
    };
    let mut cells = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() != 13 {
            bail!(Report, "summary row has {} fields, expected 13", row.len());
        }
        let regime: Regime = row[0].parse()?;
        let sparsity: f64 = num(&row[1], "target_sparsity")?;
        let seed: u64 = num(&row[2], "seed")?;
        let cell_dir: PathBuf = dir.join("cells").join(cell_name(regime, sparsity, seed));
        let outcome = if row[3] == "ok" {
            let records = read_csv(&cell_dir.join("calibration.csv"))?
                .unwrap_or_default()
                .iter()
                .map(|r| Ok(CalibrationRecord { confidence: num(&r[0], "confidence")?, correct: r[1] == "1" }))
                .collect::<Result<Vec<_>>>()?;
            let jsv_trace = read_csv(&cell_dir.join("metrics.csv"))?
                .unwrap_or_default()
                .iter()
                .filter(|r| r.len() == 9 && r[2].is_empty() && !r[8].is_empty())
                .map(|r| Ok((num(&r[1], "step")?, num(&r[8], "mean_jsv")?)))
                .collect::<Result<Vec<_>>>()?;
            let surface = match read_csv(&cell_dir.join("surface.csv"))? {
                Some(points) if !points.is_empty() => {
                    let n = (points.len() as f64).sqrt().round() as usize;
                    let coords = points[..n].iter().map(|p| num(&p[1], "b")).collect::<Result<Vec<f64>>>()?;
                    let values = points.iter().map(|p| num(&p[2], "loss")).collect::<Result<Vec<f64>>>()?;
                    Some(SurfaceGrid { d1: Vec::new(), d2: Vec::new(), coords, values })
                }
                _ => None,
            };
            let opt_num = |f: &str, what: &str| -> Result<Option<f64>> {
                if f.is_empty() { Ok(None) } else { num(f, what).map(Some) }
            };
            Ok(CellMetrics {
                test_acc: num(&row[4], "test_acc")?,
                sparsity: num(&row[5], "sparsity")?,
                ece: num(&row[6], "ece")?,
                aurc: num(&row[7], "aurc")?,
                mean_jsv: num(&row[8], "mean_jsv")?,
                jsv_early: opt_num(&row[9], "jsv_early")?,
                jsv_trace,
                prune_loss: (!row[10].is_empty()).then(|| row[10].clone()),
                train_loss: row[11].clone(),
                records,
                surface,
            })
        } else {
            Err(row[12].clone())
        };
        cells.push(CellResult { regime, sparsity, seed, outcome, runtime_secs: 0.0, run: None });
    }
    Ok(SweepReport { config_hash: config.hash(), config, cells })
}
