//! Calibration (ECE, AURC), trainability (Mean-JSV) and loss-surface probes.

mod surface;

pub use surface::{filter_normalized_direction, loss_surface, surface_grid, write_surface_csv, SurfaceGrid};

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{bail, Result};
use crate::model::{record_logits, MaskedModel};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Max class probability and whether the argmax was right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRecord {
    pub confidence: f64,
    pub correct: bool,
}

/// Records from `[n, C]` logits; ties in the argmax go to the lower class.
pub fn calibration_records(logits: &Tensor, labels: &[usize]) -> Result<Vec<CalibrationRecord>> {
    let &[n, c] = logits.shape() else {
        bail!(Shape, "expected [n, C] logits, got {:?}", logits.shape());
    };
    if labels.len() != n {
        bail!(Shape, "{} labels for {n} rows", labels.len());
    }
    let probs = crate::distill::SoftTargets::from_logits(logits.data(), c, 1.0)?;
    Ok((0..n)
        .map(|r| {
            let row = probs.row(r);
            let (arg, &conf) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, (j, p)| if *p > *best.1 { (j, p) } else { best });
            CalibrationRecord { confidence: conf.clamp(0.0, 1.0), correct: arg == labels[r] }
        })
        .collect())
}

pub fn accuracy(records: &[CalibrationRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
}

/// Expected calibration error over `n_bins` equal-width bins; confidence
/// `c` lands in bin `min(⌊c·n_bins⌋, n_bins − 1)`.
pub fn ece(records: &[CalibrationRecord], n_bins: usize) -> Result<f64> {
    if records.is_empty() {
        bail!(Config, "ECE of an empty record set");
    }
    if n_bins == 0 {
        bail!(Config, "ECE needs at least one bin");
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0.0; n_bins];
    for r in records {
        let b = ((r.confidence * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += r.confidence;
        hits[b] += if r.correct { 1.0 } else { 0.0 };
    }
    let n = records.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / n) * (hits[b] / k - conf[b] / k).abs()
        })
        .sum())
}

/// Area under the risk-coverage curve. Records are ordered by confidence,
/// descending, ties kept in input order; the result is the mean of the
/// selective risks at coverage `k/N`, `k = 1..N`.
pub fn aurc(records: &[CalibrationRecord]) -> Result<f64> {
    Ok(risk_coverage(records)?.iter().map(|&(_, risk)| risk).sum::<f64>() / records.len() as f64)
}

/// `(coverage, risk)` for every prefix of the confidence ranking.
pub fn risk_coverage(records: &[CalibrationRecord]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        bail!(Config, "AURC of an empty record set");
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].confidence.total_cmp(&records[a].confidence));
    let n = records.len() as f64;
    let mut errors = 0usize;
    Ok(order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            errors += usize::from(!records[i].correct);
            ((k + 1) as f64 / n, errors as f64 / (k + 1) as f64)
        })
        .collect())
}

/// CSV with columns `confidence,correct`.
pub fn write_calibration_csv<W: Write>(records: &[CalibrationRecord], mut out: W) -> Result<()> {
    writeln!(out, "confidence,correct")?;
    for r in records {
        writeln!(out, "{},{}", r.confidence, u8::from(r.correct))?;
    }
    Ok(())
}

/// Per-example input→logit Jacobians of the masked network, `[n][C × D]`
/// row-major, one seeded backward pass per class.
pub fn input_jacobians(model: &MaskedModel, x: &Tensor) -> Result<Vec<DMatrix<f64>>> {
    let n = x.shape()[0];
    let d = x.numel() / n;
    let c = model.classes();
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(vec![model.num_params()], model.effective_params())?;
    let xv = tape.param(x.shape().to_vec(), x.data().to_vec())?;
    let z = record_logits(model.layout(), &mut tape, p, xv)?;
    let mut jac = vec![DMatrix::zeros(c, d); n];
    for j in 0..c {
        let mut seed = vec![0.0; n * c];
        for r in 0..n {
            seed[r * c + j] = 1.0;
        }
        let g = tape.backward_seeded(z, seed)?;
        let gx = g.get_or_zeros(xv, n * d);
        for (r, m) in jac.iter_mut().enumerate() {
            for k in 0..d {
                m[(j, k)] = gx[r * d + k];
            }
        }
    }
    Ok(jac)
}

/// Mean of all singular values of the per-example Jacobians.
pub fn mean_jsv(model: &MaskedModel, x: &Tensor) -> Result<f64> {
    if x.shape().first().copied().unwrap_or(0) == 0 {
        bail!(Shape, "Mean-JSV needs a nonempty batch");
    }
    let jac = input_jacobians(model, x)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, m) in jac.into_iter().enumerate() {
        let Some(svd) = m.try_svd(false, false, f64::EPSILON, 10_000) else {
            bail!(Numerics, "SVD of example {r}'s Jacobian did not converge");
        };
        total += svd.singular_values.iter().sum::<f64>();
        count += svd.singular_values.len();
    }
    Ok(total / count as f64)
}
