//! Datasets, file parsers and the batch samplers used by pruning and training.

mod formats;
mod sampler;
mod synthetic;

pub use formats::{
    load_cifar_bin, load_idx, read_idx_images, read_idx_labels, write_cifar_bin, write_idx_images, write_idx_labels,
    IdxImages,
};
pub use sampler::{Batch, BatchKind, BatchPlan, Sampler};
pub use synthetic::{make_synthetic, Synthetic};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Labelled examples with a fixed per-example feature shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    feature_shape: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        feature_shape: Vec<usize>,
        labels: Vec<usize>,
        classes: usize,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let numel: usize = feature_shape.iter().product();
        if numel == 0 || inputs.len() != numel * labels.len() {
            bail!(Shape, "{} inputs do not form {} examples of shape {feature_shape:?}", inputs.len(), labels.len());
        }
        if splits.len() != labels.len() {
            bail!(Shape, "{} split tags for {} examples", splits.len(), labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            bail!(Format, "label {bad} out of range for {classes} classes");
        }
        let mut counts = vec![0usize; classes];
        for &l in &labels {
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            bail!(Format, "class {c} has no examples");
        }
        Ok(Self { inputs, feature_shape, labels, classes, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_numel(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.feature_numel();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Stacks the given examples into a `[n, ...feature_shape]` tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.feature_numel());
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        Tensor::new(shape, data)
    }

    /// Re-tags splits with the 80/20 index-hash rule.
    pub fn with_hash_split(mut self) -> Self {
        self.splits = (0..self.len()).map(hash_split).collect();
        self
    }

    /// Concatenates two datasets with identical feature shapes.
    pub fn concat(self, other: Dataset) -> Result<Self> {
        if self.feature_shape != other.feature_shape {
            bail!(Shape, "cannot concatenate {:?} with {:?}", self.feature_shape, other.feature_shape);
        }
        let classes = self.classes.max(other.classes);
        let mut inputs = self.inputs;
        inputs.extend(other.inputs);
        let mut labels = self.labels;
        labels.extend(other.labels);
        let mut splits = self.splits;
        splits.extend(other.splits);
        Self::new(inputs, self.feature_shape, labels, classes, splits)
    }

    /// Keeps the first `n` examples of each split, in order.
    pub fn truncate_per_split(self, train: usize, test: usize) -> Result<Self> {
        let (mut kept_train, mut kept_test) = (0, 0);
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| match self.splits[i] {
                Split::Train => {
                    kept_train += 1;
                    kept_train <= train
                }
                Split::Test => {
                    kept_test += 1;
                    kept_test <= test
                }
            })
            .collect();
        let n = self.feature_numel();
        let inputs = keep.iter().flat_map(|&i| self.inputs[i * n..(i + 1) * n].iter().copied()).collect();
        let labels = keep.iter().map(|&i| self.labels[i]).collect();
        let splits = keep.iter().map(|&i| self.splits[i]).collect();
        Self::new(inputs, self.feature_shape, labels, self.classes, splits)
    }
}

/// SplitMix64 finalizer; used for index hashing and seed derivation.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 80/20 split: an index goes to test iff its hash is 0 mod 5.
pub fn hash_split(index: usize) -> Split {
    if mix64(index as u64).is_multiple_of(5) {
        Split::Test
    } else {
        Split::Train
    }
}
