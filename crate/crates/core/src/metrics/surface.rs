//! Two-direction loss-surface grids with filter-normalized directions.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::distill::cross_entropy;
use crate::error::{bail, Result};
use crate::model::{record_logits, MaskedModel};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// Axis offsets shared by both directions; the middle entry is exactly 0.
    pub coords: Vec<f64>,
    /// Row-major `[i][j]` = loss at `θ + coords[i]·d1 + coords[j]·d2`.
    pub values: Vec<f64>,
}

impl SurfaceGrid {
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    pub fn center(&self) -> f64 {
        let c = self.n() / 2;
        self.at(c, c)
    }
}

/// Gaussian direction rescaled so each output channel's slice has the norm
/// of the matching weights. Pruned weights and biases get zero.
pub fn filter_normalized_direction(model: &MaskedModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta = model.effective_params();
    let mut d = vec![0.0; theta.len()];
    for layer in &model.layout().layers {
        let channels = layer.channels();
        let mut dn = vec![0.0; channels];
        let mut tn = vec![0.0; channels];
        for local in 0..layer.weight_len {
            let i = layer.weight_offset + local;
            let v: f64 = rng.sample(StandardNormal);
            if model.mask().kept(i) {
                d[i] = v;
                let c = layer.channel_of(local);
                dn[c] += v * v;
                tn[c] += theta[i] * theta[i];
            }
        }
        for local in 0..layer.weight_len {
            let i = layer.weight_offset + local;
            let c = layer.channel_of(local);
            d[i] = if dn[c] > 0.0 { d[i] * (tn[c] / dn[c]).sqrt() } else { 0.0 };
        }
    }
    d
}

/// Evaluates `loss` on an odd `grid_n × grid_n` grid spanning `±span`.
pub fn surface_grid(
    theta: &[f64],
    d1: Vec<f64>,
    d2: Vec<f64>,
    grid_n: usize,
    span: f64,
    loss: impl Fn(&[f64]) -> Result<f64> + Sync,
) -> Result<SurfaceGrid> {
    if grid_n.is_multiple_of(2) {
        bail!(Config, "grid size must be odd to have a center cell, got {grid_n}");
    }
    if d1.len() != theta.len() || d2.len() != theta.len() {
        bail!(Shape, "directions must match the {} parameters", theta.len());
    }
    let half = (grid_n / 2) as f64;
    let coords: Vec<f64> =
        (0..grid_n).map(|i| if grid_n == 1 { 0.0 } else { span * (i as f64 - half) / half }).collect();
    let values = (0..grid_n * grid_n)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (coords[cell / grid_n], coords[cell % grid_n]);
            let p: Vec<f64> = theta.iter().zip(&d1).zip(&d2).map(|((t, x), y)| t + a * x + b * y).collect();
            loss(&p)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SurfaceGrid { d1, d2, coords, values })
}

/// Cross-entropy surface of `model` on `(x, labels)` around its weights.
pub fn loss_surface(
    model: &MaskedModel,
    x: &Tensor,
    labels: &[usize],
    grid_n: usize,
    span: f64,
    seed: u64,
) -> Result<SurfaceGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = filter_normalized_direction(model, &mut rng);
    let d2 = filter_normalized_direction(model, &mut rng);
    let layout = model.layout();
    surface_grid(&model.effective_params(), d1, d2, grid_n, span, |p| {
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(vec![p.len()], p.to_vec())?;
        let xv = tape.constant(x.shape().to_vec(), x.data().to_vec())?;
        let z = record_logits(layout, &mut tape, pv, xv)?;
        let l = cross_entropy(&mut tape, z, labels)?;
        Ok(tape.value(l).data()[0])
    })
}

/// CSV with columns `a,b,loss`.
pub fn write_surface_csv<W: Write>(grid: &SurfaceGrid, mut out: W) -> Result<()> {
    writeln!(out, "a,b,loss")?;
    for (i, a) in grid.coords.iter().enumerate() {
        for (j, b) in grid.coords.iter().enumerate() {
            writeln!(out, "{a},{b},{}", grid.at(i, j))?;
        }
    }
    Ok(())
}
