//! Seeded mini-batch samplers.

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix64, Dataset};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    /// Epoch-wise permutation; the last partial batch is kept.
    Uniform,
    /// `per_class` examples of every class, class-major order.
    ClassBalanced { per_class: usize },
    /// Uniform batch plus one same-class companion per example.
    PairedSameClass,
    /// Second half of batch `t` is replayed as the first half of batch `t+1`.
    HalfCarryover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub kind: BatchKind,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// Same-class partners, aligned with `indices` (paired batches only).
    pub companions: Option<Vec<usize>>,
    /// Number of leading entries replayed from the previous batch.
    pub carried: usize,
    pub epoch: usize,
}

/// Stateful sampler over a fixed pool of example indices.
#[derive(Debug, Clone)]
pub struct Sampler {
    plan: BatchPlan,
    pool: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    perm: Vec<usize>,
    cursor: usize,
    epoch: usize,
    carry: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(plan: BatchPlan, dataset: &Dataset, pool: Vec<usize>) -> Result<Self> {
        if plan.batch_size == 0 {
            bail!(Sampler, "batch size must be positive");
        }
        if pool.is_empty() {
            bail!(Sampler, "empty sampling pool");
        }
        let mut by_class = vec![Vec::new(); dataset.classes()];
        for &i in &pool {
            by_class[dataset.label(i)].push(i);
        }
        match plan.kind {
            BatchKind::ClassBalanced { per_class } => {
                if per_class == 0 || per_class * dataset.classes() != plan.batch_size {
                    bail!(
                        Sampler,
                        "class-balanced batch of {} is not {per_class} × {} classes",
                        plan.batch_size,
                        dataset.classes()
                    );
                }
                if let Some(c) = by_class.iter().position(Vec::is_empty) {
                    bail!(Sampler, "class {c} has no examples in the pool");
                }
            }
            BatchKind::PairedSameClass => {
                if let Some(c) = by_class.iter().position(|v| v.len() == 1) {
                    bail!(Sampler, "class {c} has a single example, no same-class companion exists");
                }
            }
            BatchKind::HalfCarryover => {
                if plan.batch_size < 2 || !plan.batch_size.is_multiple_of(2) {
                    bail!(Sampler, "half-carryover needs an even batch size, got {}", plan.batch_size);
                }
            }
            BatchKind::Uniform => {}
        }
        let mut s = Self {
            plan,
            pool,
            by_class,
            perm: Vec::new(),
            cursor: 0,
            epoch: 0,
            carry: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(mix64(plan.seed ^ 0xA5A5_A5A5)),
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Batches needed to visit every pool index once as a fresh draw.
    pub fn batches_per_epoch(&self) -> usize {
        let fresh = match self.plan.kind {
            BatchKind::HalfCarryover => self.plan.batch_size / 2,
            _ => self.plan.batch_size,
        };
        self.pool.len().div_ceil(fresh)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.plan.seed.wrapping_add(mix64(self.epoch as u64))));
        self.perm = self.pool.clone();
        self.perm.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.reshuffle();
    }

    /// Takes up to `k` indices without crossing an epoch boundary.
    fn take_within_epoch(&mut self, k: usize) -> Vec<usize> {
        if self.cursor == self.perm.len() {
            self.advance_epoch();
        }
        let end = (self.cursor + k).min(self.perm.len());
        let out = self.perm[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    /// Takes exactly `k` indices, rolling into the next epoch as needed.
    fn take_exact(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let need = k - out.len();
            out.extend(self.take_within_epoch(need));
        }
        out
    }

    /// One same-class partner per index, distinct from it whenever the class
    /// has another pool member.
    pub fn pair_companions(&mut self, dataset: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
        let mut companions = Vec::with_capacity(indices.len());
        for &i in indices {
            let members = &self.by_class[dataset.label(i)];
            let others: Vec<usize> = members.iter().copied().filter(|&j| j != i).collect();
            match others.choose(&mut self.rng) {
                Some(&j) => companions.push(j),
                None => bail!(Sampler, "class {} has a single example, no same-class companion exists", dataset.label(i)),
            }
        }
        Ok(companions)
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        let bs = self.plan.batch_size;
        let epoch_at_start = if self.cursor == self.perm.len() { self.epoch + 1 } else { self.epoch };
        match self.plan.kind {
            BatchKind::Uniform => {
                let indices = self.take_within_epoch(bs);
                Ok(Batch { indices, companions: None, carried: 0, epoch: self.epoch })
            }
            BatchKind::ClassBalanced { per_class } => {
                let mut indices = Vec::with_capacity(bs);
                for members in &self.by_class {
                    if members.len() >= per_class {
                        indices.extend(members.choose_multiple(&mut self.rng, per_class).copied());
                    } else {
                        warn!("class has {} pool examples, sampling {per_class} with replacement", members.len());
                        for _ in 0..per_class {
                            indices.push(*members.choose(&mut self.rng).expect("non-empty class"));
                        }
                    }
                }
                Ok(Batch { indices, companions: None, carried: 0, epoch: self.epoch })
            }
            BatchKind::PairedSameClass => {
                let indices = self.take_within_epoch(bs);
                let companions = self.pair_companions(dataset, &indices)?;
                Ok(Batch { indices, companions: Some(companions), carried: 0, epoch: self.epoch })
            }
            BatchKind::HalfCarryover => {
                let half = bs / 2;
                let carried = self.carry.len();
                let mut indices = std::mem::take(&mut self.carry);
                indices.extend(self.take_exact(bs - carried));
                self.carry = indices[bs - half..].to_vec();
                Ok(Batch { indices, companions: None, carried, epoch: epoch_at_start })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Split, Synthetic};

    fn data() -> Dataset {
        make_synthetic(&Synthetic::Gaussians { classes: 3, dim: 2, separation: 3.0, per_class: 20 }, 0).unwrap()
    }

    fn sampler(kind: BatchKind, bs: usize, seed: u64) -> (Dataset, Sampler) {
        let d = data();
        let pool = d.indices(Split::Train);
        let s = Sampler::new(BatchPlan { kind, batch_size: bs, seed }, &d, pool).unwrap();
        (d, s)
    }

    #[test]
    fn uniform_epoch_covers_pool_once() {
        let (d, mut s) = sampler(BatchKind::Uniform, 7, 3);
        let pool = d.indices(Split::Train);
        let mut seen = Vec::new();
        for _ in 0..s.batches_per_epoch() {
            let b = s.next_batch(&d).unwrap();
            assert_eq!(b.epoch, 0);
            seen.extend(b.indices);
        }
        seen.sort_unstable();
        assert_eq!(seen, pool);
        assert_eq!(s.next_batch(&d).unwrap().epoch, 1);
    }

    #[test]
    fn epochs_use_different_permutations() {
        let (d, mut s) = sampler(BatchKind::Uniform, 1000, 3);
        let a = s.next_batch(&d).unwrap().indices;
        let b = s.next_batch(&d).unwrap().indices;
        assert_ne!(a, b);
    }

    #[test]
    fn class_balanced_has_equal_counts() {
        let (d, mut s) = sampler(BatchKind::ClassBalanced { per_class: 4 }, 12, 1);
        let b = s.next_batch(&d).unwrap();
        assert_eq!(d.class_counts(&b.indices), vec![4, 4, 4]);
    }

    #[test]
    fn class_balanced_rejects_mismatched_size() {
        let d = data();
        let plan = BatchPlan { kind: BatchKind::ClassBalanced { per_class: 4 }, batch_size: 10, seed: 0 };
        assert!(Sampler::new(plan, &d, d.indices(Split::Train)).is_err());
    }

    #[test]
    fn companions_share_class_and_differ() {
        let (d, mut s) = sampler(BatchKind::PairedSameClass, 10, 2);
        let b = s.next_batch(&d).unwrap();
        for (&i, &j) in b.indices.iter().zip(b.companions.as_ref().unwrap()) {
            assert_eq!(d.label(i), d.label(j));
            assert_ne!(i, j);
        }
    }

    #[test]
    fn singleton_class_cannot_pair() {
        let d = Dataset::new(vec![0.0, 1.0, 2.0], vec![1], vec![0, 0, 1], 2, vec![Split::Train; 3]).unwrap();
        let plan = BatchPlan { kind: BatchKind::PairedSameClass, batch_size: 2, seed: 0 };
        assert!(matches!(Sampler::new(plan, &d, vec![0, 1, 2]), Err(crate::Error::Sampler(_))));
    }

    #[test]
    fn carryover_replays_second_half() {
        let (d, mut s) = sampler(BatchKind::HalfCarryover, 8, 5);
        let mut prev = s.next_batch(&d).unwrap();
        assert_eq!(prev.carried, 0);
        for _ in 0..10 {
            let b = s.next_batch(&d).unwrap();
            assert_eq!(b.indices.len(), 8);
            assert_eq!(b.carried, 4);
            assert_eq!(&b.indices[..4], &prev.indices[4..]);
            prev = b;
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let (d, mut a) = sampler(BatchKind::Uniform, 5, 11);
        let (_, mut b) = sampler(BatchKind::Uniform, 5, 11);
        for _ in 0..20 {
            assert_eq!(a.next_batch(&d).unwrap(), b.next_batch(&d).unwrap());
        }
    }
}
