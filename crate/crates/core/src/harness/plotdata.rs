//! Headered CSVs for accuracy, Mean-JSV, loss-surface and risk-coverage plots.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::sweep::SweepReport;
use crate::error::{bail, Error, Result};
use crate::metrics::{aurc, risk_coverage};
use crate::train::Regime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    AccuracyVsSparsity,
    JsvCurve,
    SurfaceContour,
    RiskCoverage,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [Self::AccuracyVsSparsity, Self::JsvCurve, Self::SurfaceContour, Self::RiskCoverage];
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AccuracyVsSparsity => "accuracy_vs_sparsity",
            Self::JsvCurve => "jsv_curve",
            Self::SurfaceContour => "surface_contour",
            Self::RiskCoverage => "risk_coverage",
        })
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown plot kind '{s}'")))
    }
}

/// CSV contents keyed by file name, in a deterministic order.
pub fn plotdata(report: &SweepReport, kind: PlotKind) -> Result<Vec<(String, String)>> {
    match kind {
        PlotKind::AccuracyVsSparsity => {
            let rows: Vec<_> = report.aggregates().into_iter().filter(|a| a.n_ok > 0).collect();
            if rows.is_empty() {
                bail!(Report, "no successful cell carries metric 'test_acc'");
            }
            let mut s = String::from("regime,sparsity,acc_mean,acc_std,n\n");
            for a in rows {
                let _ = writeln!(s, "{},{},{},{},{}", a.regime, a.sparsity, a.acc_mean, a.acc_std, a.n_ok);
            }
            Ok(vec![("accuracy_vs_sparsity.csv".into(), s)])
        }
        PlotKind::JsvCurve => jsv_curves(report),
        PlotKind::SurfaceContour => {
            let mut files = Vec::new();
            for c in &report.cells {
                if let Some(grid) = c.metrics().and_then(|m| m.surface.as_ref()) {
                    let mut s = String::from("a,b,loss\n");
                    for (i, a) in grid.coords.iter().enumerate() {
                        for (j, b) in grid.coords.iter().enumerate() {
                            let _ = writeln!(s, "{a},{b},{}", grid.at(i, j));
                        }
                    }
                    files.push((format!("surface_{}.csv", c.name()), s));
                }
            }
            if files.is_empty() {
                bail!(Report, "no cell carries metric 'surface' (set surface_grid to an odd size)");
            }
            Ok(files)
        }
        PlotKind::RiskCoverage => {
            let mut files = Vec::new();
            for c in &report.cells {
                let Some(m) = c.metrics().filter(|m| !m.records.is_empty()) else { continue };
                let area = aurc(&m.records)?;
                let mut s = String::from("coverage,risk,aurc\n");
                for (cov, risk) in risk_coverage(&m.records)? {
                    let _ = writeln!(s, "{cov},{risk},{area}");
                }
                files.push((format!("risk_coverage_{}.csv", c.name()), s));
            }
            if files.is_empty() {
                bail!(Report, "no cell carries metric 'calibration records'");
            }
            Ok(files)
        }
    }
}

/// One file per target sparsity: seed-mean Mean-JSV per step for each
/// regime, with its running mean.
fn jsv_curves(report: &SweepReport) -> Result<Vec<(String, String)>> {
    let mut sparsities: Vec<f64> = Vec::new();
    for c in &report.cells {
        if c.metrics().is_some_and(|m| !m.jsv_trace.is_empty()) && !sparsities.contains(&c.sparsity) {
            sparsities.push(c.sparsity);
        }
    }
    if sparsities.is_empty() {
        bail!(Report, "no cell carries metric 'mean_jsv' per step (set jsv_steps > 0)");
    }
    let mut files = Vec::new();
    for s in sparsities {
        let mut regimes: Vec<Regime> = Vec::new();
        for c in report.cells.iter().filter(|c| c.sparsity == s) {
            if !regimes.contains(&c.regime) {
                regimes.push(c.regime);
            }
        }
        let mut out = String::from("regime,step,mean_jsv,running_mean,n\n");
        for r in regimes {
            let traces: Vec<&Vec<(usize, f64)>> = report
                .cells
                .iter()
                .filter(|c| c.sparsity == s && c.regime == r)
                .filter_map(|c| c.metrics().map(|m| &m.jsv_trace))
                .filter(|t| !t.is_empty())
                .collect();
            let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
            let mut running = 0.0;
            for k in 0..len {
                let v = traces.iter().map(|t| t[k].1).sum::<f64>() / traces.len() as f64;
                running += (v - running) / (k + 1) as f64;
                let _ = writeln!(out, "{r},{},{v},{running},{}", traces[0][k].0, traces.len());
            }
        }
        files.push((format!("jsv_curve_s{s}.csv"), out));
    }
    Ok(files)
}

/// Writes the plot files for `kind` into `dir` and returns their paths.
pub fn emit_plotdata(report: &SweepReport, kind: PlotKind, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = plotdata(report, kind)?;
    fs::create_dir_all(dir)?;
    files
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            fs::write(&path, body)?;
            Ok(path)
        })
        .collect()
}
