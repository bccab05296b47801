use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{ClassId, DataError, EmbeddingDataset};
use crate::seed;

/// Disjoint class ownership across clients.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub n_clients: usize,
    pub assignment: BTreeMap<ClassId, usize>,
    pub clients: Vec<EmbeddingDataset>,
}

impl PartitionPlan {
    pub fn classes_of(&self, client: usize) -> BTreeSet<ClassId> {
        self.assignment
            .iter()
            .filter(|(_, &owner)| owner == client)
            .map(|(&c, _)| c)
            .collect()
    }
}

/// Gives every client a disjoint set of classes. When the class count does
/// not divide evenly, lower client ids get one extra class.
pub fn partition_non_iid(
    ds: &EmbeddingDataset,
    n_clients: usize,
    seed: u64,
) -> Result<PartitionPlan, DataError> {
    let mut classes: Vec<ClassId> = ds.present_classes().into_iter().collect();
    if n_clients == 0 {
        return Err(DataError::Config("need at least one client".into()));
    }
    if n_clients > classes.len() {
        return Err(DataError::Config(format!(
            "{n_clients} clients cannot each own a distinct class out of {}",
            classes.len()
        )));
    }
    classes.shuffle(&mut seed::rng(seed, &[0x9a27]));
    let base = classes.len() / n_clients;
    let extra = classes.len() % n_clients;
    let mut assignment = BTreeMap::new();
    let mut it = classes.into_iter();
    for client in 0..n_clients {
        let take = base + usize::from(client < extra);
        for c in it.by_ref().take(take) {
            assignment.insert(c, client);
        }
    }
    let mut buckets = vec![Vec::new(); n_clients];
    for r in ds.records() {
        buckets[assignment[&r.label]].push(r.clone());
    }
    Ok(PartitionPlan {
        n_clients,
        assignment,
        clients: buckets.into_iter().map(|b| ds.with_records(b)).collect(),
    })
}

/// Shuffles records and deals them round-robin, so every client sees every class.
pub fn partition_iid(
    ds: &EmbeddingDataset,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<EmbeddingDataset>, DataError> {
    if n_clients == 0 || n_clients > ds.len() {
        return Err(DataError::Config(format!(
            "cannot deal {} records to {n_clients} clients",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[0x11d]));
    let mut buckets = vec![Vec::new(); n_clients];
    for (k, i) in order.into_iter().enumerate() {
        buckets[k % n_clients].push(ds.records()[i].clone());
    }
    Ok(buckets.into_iter().map(|b| ds.with_records(b)).collect())
}

/// Per-class split into (kept, held out), holding out `round(fraction · n_c)`
/// records of every class.
pub fn stratified_split(
    ds: &EmbeddingDataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset), DataError> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(DataError::Config(format!(
            "holdout fraction must be in [0, 1), got {holdout_fraction}"
        )));
    }
    let mut rng = seed::rng(seed, &[0x5e1]);
    let mut keep = Vec::new();
    let mut hold = Vec::new();
    for (_, mut idx) in ds.indices_by_class() {
        idx.shuffle(&mut rng);
        let n_hold = (holdout_fraction * idx.len() as f64).round() as usize;
        let (h, k) = idx.split_at(n_hold);
        hold.extend(h.iter().map(|&i| ds.records()[i].clone()));
        keep.extend(k.iter().map(|&i| ds.records()[i].clone()));
    }
    Ok((ds.with_records(keep), ds.with_records(hold)))
}
