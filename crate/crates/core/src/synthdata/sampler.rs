//! P identities x K instances batch sampling.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, SampleRecord};
use crate::error::{Error, Result};

/// One PK batch: `P` identities with `K` samples each, grouped by identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// indices into the record list
    pub indices: Vec<usize>,
    /// dense class labels (rank of the pid among all pids in the record list)
    pub labels: Vec<usize>,
}

/// Identity-balanced sampler. Each epoch is a random permutation of the
/// identities cut into groups of `P` (a trailing partial group is dropped).
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_pid: BTreeMap<usize, Vec<usize>>,
    label_of: BTreeMap<usize, usize>,
    p: usize,
    k: usize,
    seed: u64,
}

impl PkSampler {
    pub fn new(records: &[SampleRecord], p: usize, k: usize, seed: u64) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config("P and K must be positive".into()));
        }
        let mut by_pid: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_pid.entry(r.pid).or_default().push(i);
        }
        if p > by_pid.len() {
            return Err(Error::Config(format!("P = {p} exceeds the {} identities available", by_pid.len())));
        }
        let label_of = by_pid.keys().enumerate().map(|(l, &pid)| (pid, l)).collect();
        Ok(Self { by_pid, label_of, p, k, seed })
    }

    pub fn num_classes(&self) -> usize {
        self.by_pid.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_pid.len() / self.p
    }

    pub fn label_of(&self, pid: usize) -> Option<usize> {
        self.label_of.get(&pid).copied()
    }

    fn epoch_groups(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut ids: Vec<usize> = self.by_pid.keys().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch as u64));
        ids.shuffle(&mut rng);
        ids.chunks_exact(self.p).map(<[usize]>::to_vec).collect()
    }

    /// Batch `pos` of `epoch`. Deterministic in (seed, epoch, pos).
    pub fn batch(&self, epoch: usize, pos: usize) -> Result<Batch> {
        let groups = self.epoch_groups(epoch);
        let group = groups
            .get(pos)
            .ok_or_else(|| Error::Config(format!("batch {pos} out of range ({} per epoch)", groups.len())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.seed, epoch as u64), 1 + pos as u64));
        let mut indices = Vec::with_capacity(self.p * self.k);
        let mut labels = Vec::with_capacity(self.p * self.k);
        for pid in group {
            let pool = &self.by_pid[pid];
            let mut chosen: Vec<usize> = pool.clone();
            chosen.shuffle(&mut rng);
            chosen.truncate(self.k);
            while chosen.len() < self.k {
                chosen.push(*pool.choose(&mut rng).expect("non-empty pool"));
            }
            labels.extend(std::iter::repeat_n(self.label_of[pid], self.k));
            indices.extend(chosen);
        }
        Ok(Batch { indices, labels })
    }

    pub fn epoch(&self, epoch: usize) -> Result<Vec<Batch>> {
        (0..self.batches_per_epoch()).map(|pos| self.batch(epoch, pos)).collect()
    }
}

/// Free-function form of [`PkSampler::batch`].
pub fn pk_sample(records: &[SampleRecord], p: usize, k: usize, seed: u64, epoch: usize, pos: usize) -> Result<Batch> {
    PkSampler::new(records, p, k, seed)?.batch(epoch, pos)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn records(ids: usize, per: usize) -> Vec<SampleRecord> {
        (0..ids * per)
            .map(|i| SampleRecord {
                image: format!("images/{i:05}.ppm"),
                pid: i / per,
                camid: (i % 2) as i64,
                fg_tokens: vec![2],
                bg_tokens: vec![3],
            })
            .collect()
    }

    #[test]
    fn epoch_partitions_identities() {
        let recs = records(4, 3);
        let s = PkSampler::new(&recs, 2, 2, 7).unwrap();
        for epoch in 0..10 {
            let batches = s.epoch(epoch).unwrap();
            assert_eq!(batches.len(), 2);
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.iter().map(|&i| recs[i].pid)).collect::<BTreeSet<_>>().into_iter().collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn batches_hold_k_of_each_of_p() {
        let recs = records(20, 5);
        let s = PkSampler::new(&recs, 16, 4, 3).unwrap();
        let b = s.batch(0, 0).unwrap();
        assert_eq!(b.indices.len(), 64);
        let mut counts = BTreeMap::new();
        for &l in &b.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 16);
        assert!(counts.values().all(|&c| c == 4));
        // without replacement when the identity has enough images
        for chunk in b.indices.chunks(4) {
            assert_eq!(chunk.iter().collect::<BTreeSet<_>>().len(), 4);
        }
    }

    #[test]
    fn short_identities_are_sampled_with_replacement() {
        let recs = records(3, 2);
        let b = pk_sample(&recs, 3, 4, 0, 0, 0).unwrap();
        assert_eq!(b.indices.len(), 12);
    }

    #[test]
    fn deterministic_and_errors() {
        let recs = records(8, 4);
        assert_eq!(pk_sample(&recs, 4, 2, 9, 3, 1).unwrap(), pk_sample(&recs, 4, 2, 9, 3, 1).unwrap());
        assert!(pk_sample(&recs, 9, 2, 9, 0, 0).is_err());
        assert!(pk_sample(&recs, 4, 2, 9, 0, 2).is_err());
    }
}
