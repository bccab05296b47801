//! Shared feature replay pool.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{Batch, ClassId, DataError, EmbeddingDataset, EmbeddingRecord};
use crate::seed;

/// Cross-client collection of shared feature vectors. Holds only fixed-length
/// real vectors and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayPool {
    d_in: usize,
    class_names: Vec<String>,
    records: Vec<EmbeddingRecord>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
    pub share_rate: f64,
}

fn check_share_rate(share_rate: f64) -> Result<(), DataError> {
    if !(share_rate > 0.0 && share_rate <= 1.0) {
        return Err(DataError::Config(format!(
            "share rate must be in (0, 1], got {share_rate}"
        )));
    }
    Ok(())
}

/// Number of records a client shares: `ceil(rate · n)`, raised to one per
/// local class and capped at `n`.
pub fn share_count(n: usize, n_classes: usize, share_rate: f64) -> usize {
    // the epsilon keeps 0.01 · 600 at 6 rather than 7
    let raw = (share_rate * n as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.max(n_classes).min(n)
}

/// Stratified subsample of one client's data: at least one record of every
/// local class, the rest uniformly without replacement. Copies keep the
/// original record order.
pub fn sample_share<R: Rng>(
    ds: &EmbeddingDataset,
    share_rate: f64,
    rng: &mut R,
) -> Result<EmbeddingDataset, DataError> {
    check_share_rate(share_rate)?;
    let by_class = ds.indices_by_class();
    let target = share_count(ds.len(), by_class.len(), share_rate);
    let mut chosen = BTreeSet::new();
    for idx in by_class.values() {
        chosen.insert(*idx.choose(rng).expect("classes are non-empty"));
    }
    let mut rest: Vec<usize> = (0..ds.len()).filter(|i| !chosen.contains(i)).collect();
    rest.shuffle(rng);
    chosen.extend(rest.into_iter().take(target - chosen.len()));
    Ok(ds.with_records(chosen.into_iter().map(|i| ds.records()[i].clone()).collect()))
}

/// Builds the pool from every client's stratified share. Client `i` samples
/// from its own stream derived from `(seed, i)`.
pub fn collect_replay(
    clients: &[EmbeddingDataset],
    share_rate: f64,
    seed: u64,
) -> Result<ReplayPool, DataError> {
    check_share_rate(share_rate)?;
    let first = clients
        .first()
        .ok_or_else(|| DataError::Config("no clients to collect from".into()))?;
    let mut pool = ReplayPool::empty(first.d_in(), first.class_names().to_vec(), share_rate);
    for (i, ds) in clients.iter().enumerate() {
        if ds.is_empty() {
            return Err(DataError::EmptyClient { client: i });
        }
        let share = sample_share(ds, share_rate, &mut seed::rng(seed, &[i as u64]))?;
        pool.merge(&share)?;
    }
    Ok(pool)
}

impl ReplayPool {
    pub fn empty(d_in: usize, class_names: Vec<String>, share_rate: f64) -> Self {
        Self {
            d_in,
            class_names,
            records: Vec::new(),
            by_class: BTreeMap::new(),
            share_rate,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.by_class.keys().copied().collect()
    }

    pub fn class_count(&self, class: ClassId) -> usize {
        self.by_class.get(&class).map_or(0, Vec::len)
    }

    /// Appends a shared subset, e.g. from a late-joining client.
    pub fn merge(&mut self, share: &EmbeddingDataset) -> Result<(), DataError> {
        if share.d_in() != self.d_in {
            return Err(DataError::Config(format!(
                "share has width {}, pool has width {}",
                share.d_in(),
                self.d_in
            )));
        }
        if share.n_classes() > self.class_names.len() {
            self.class_names = share.class_names().to_vec();
        }
        for r in share.records() {
            self.by_class
                .entry(r.label)
                .or_default()
                .push(self.records.len());
            self.records.push(r.clone());
        }
        Ok(())
    }

    pub fn to_dataset(&self) -> EmbeddingDataset {
        EmbeddingDataset::new(
            self.d_in,
            self.class_names.clone(),
            self.records.clone(),
            "replay pool",
        )
        .expect("pool records are validated on merge")
    }

    /// Class-balanced replay batch over `classes` (every pooled class if the
    /// set is empty). Draws without replacement, round-robin over shuffled
    /// classes, while the slice holds at least `batch_size` records; otherwise
    /// each draw picks a class uniformly and then a record uniformly.
    pub fn sample_batch<R: Rng>(
        &self,
        batch_size: usize,
        classes: &BTreeSet<ClassId>,
        rng: &mut R,
    ) -> Result<Batch, DataError> {
        if self.is_empty() {
            return Err(DataError::EmptyPool);
        }
        let wanted: Vec<ClassId> = if classes.is_empty() {
            self.by_class.keys().copied().collect()
        } else {
            classes.iter().copied().collect()
        };
        let mut slices = Vec::with_capacity(wanted.len());
        for c in &wanted {
            slices.push(self.by_class.get(c).ok_or(DataError::MissingClass(*c))?);
        }
        let slice_len: usize = slices.iter().map(|s| s.len()).sum();

        let mut picked = Vec::with_capacity(batch_size);
        if slice_len >= batch_size {
            let mut queues: Vec<Vec<usize>> = slices
                .iter()
                .map(|s| {
                    let mut q = s.to_vec();
                    q.shuffle(rng);
                    q
                })
                .collect();
            let mut order: Vec<usize> = (0..queues.len()).collect();
            while picked.len() < batch_size {
                order.shuffle(rng);
                for &k in &order {
                    if picked.len() == batch_size {
                        break;
                    }
                    if let Some(i) = queues[k].pop() {
                        picked.push(i);
                    }
                }
            }
        } else {
            for _ in 0..batch_size {
                let slice = slices.choose(rng).expect("at least one class");
                picked.push(*slice.choose(rng).expect("pooled classes are non-empty"));
            }
        }
        Ok(Batch::from_records(
            self.d_in,
            picked.iter().map(|&i| &self.records[i]),
        ))
    }
}
