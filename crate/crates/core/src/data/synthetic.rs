//! Seeded synthetic classification sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{hash_split, Dataset};
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Synthetic {
    /// Isotropic unit-variance blobs. Class `c < 2·dim` sits at
    /// `±(separation/2)·e_{c/2}`, further classes on random directions.
    Gaussians { classes: usize, dim: usize, separation: f64, per_class: usize },
    /// Interleaved 2-d spiral arms with additive Gaussian noise.
    Spirals { classes: usize, per_class: usize, noise: f64, turns: f64 },
}

pub fn make_synthetic(kind: &Synthetic, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, labels, classes, dim) = match *kind {
        Synthetic::Gaussians { classes, dim, separation, per_class } => {
            if classes < 2 || dim == 0 || per_class == 0 || separation < 0.0 {
                bail!(Config, "invalid gaussian spec {kind:?}");
            }
            let means: Vec<Vec<f64>> = (0..classes)
                .map(|c| {
                    let mut m = vec![0.0; dim];
                    if c < 2 * dim {
                        m[c / 2] = if c % 2 == 0 { separation / 2.0 } else { -separation / 2.0 };
                    } else {
                        let dir = random_direction(&mut rng, dim);
                        m.iter_mut().zip(dir).for_each(|(mi, d)| *mi = d * separation / 2.0);
                    }
                    m
                })
                .collect();
            let mut inputs = Vec::with_capacity(classes * per_class * dim);
            let mut labels = Vec::with_capacity(classes * per_class);
            for _ in 0..per_class {
                for (c, mean) in means.iter().enumerate() {
                    inputs.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
                    labels.push(c);
                }
            }
            (inputs, labels, classes, dim)
        }
        Synthetic::Spirals { classes, per_class, noise, turns } => {
            if classes < 2 || per_class == 0 || noise < 0.0 || turns <= 0.0 {
                bail!(Config, "invalid spiral spec {kind:?}");
            }
            let mut inputs = Vec::with_capacity(classes * per_class * 2);
            let mut labels = Vec::with_capacity(classes * per_class);
            for i in 0..per_class {
                for c in 0..classes {
                    let t = (i as f64 + rng.random::<f64>()) / per_class as f64;
                    let theta = std::f64::consts::TAU * (c as f64 / classes as f64 + turns * t);
                    let r = 0.1 + t;
                    inputs.push(r * theta.cos() + noise * rng.sample::<f64, _>(StandardNormal));
                    inputs.push(r * theta.sin() + noise * rng.sample::<f64, _>(StandardNormal));
                    labels.push(c);
                }
            }
            (inputs, labels, classes, 2)
        }
    };
    let splits = (0..labels.len()).map(hash_split).collect();
    Dataset::new(inputs, vec![dim], labels, classes, splits)
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / n).collect()
}
