//! Global coordination: warm start, participant selection, aggregation and
//! late-join integration.

mod aggregate;
mod latejoin;

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use aggregate::{fedavg, fedavg_with, row_gated_fedavg, AggregationMode, RowGate};
pub use latejoin::{
    compute_prototypes, expand_classifier, kd_finetune_head, prototypes_from_encoded, KdConfig,
    KdReport,
};

use crate::client::LocalUpdate;
use crate::datastore::{ClassId, DataError, EmbeddingDataset, ReplayPool};
use crate::nnkernel::{adamw_step, loss_and_gradients, AdamWConfig, AdamWState, HeadParams, KernelError};
use crate::{seed, ClientId};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("class registry: {0}")]
    Registry(String),
    #[error("cannot aggregate update from {client}: {reason}")]
    Aggregation { client: ClientId, reason: String },
    #[error("sample {sample} of class {class} has a zero-norm encoding")]
    DegenerateEncoding { sample: usize, class: ClassId },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Supervised minibatch training of every head tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

/// Plain cross-entropy training on `data` with a fresh optimizer. Returns the
/// mean loss of each epoch.
pub fn train_centralized<R: Rng>(
    params: &mut HeadParams,
    data: &EmbeddingDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>, ServerError> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(ServerError::Protocol("no data to train on".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ServerError::Config("batch size must be positive".into()));
    }
    let mut opt = AdamWState::for_params(cfg.optimizer, params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk);
            let (loss, grads) = loss_and_gradients(params, &batch.features, &batch.labels)?;
            adamw_step(params, &grads, &mut opt)?;
            sum += loss;
            steps += 1;
        }
        losses.push(sum / steps as f64);
    }
    Ok(losses)
}

/// `max(1, round(rate · n))` distinct client ids, sorted, drawn uniformly
/// from a stream keyed by `(seed, round)`.
pub fn select_participants(
    n_clients: usize,
    rate: f64,
    round: usize,
    seed: u64,
) -> Result<Vec<ClientId>, ServerError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(ServerError::Config(format!(
            "participant rate must be in (0, 1], got {rate}"
        )));
    }
    if n_clients == 0 {
        return Err(ServerError::Config("federation has no clients".into()));
    }
    let k = ((rate * n_clients as f64).round() as usize).clamp(1, n_clients);
    let mut rng = seed::rng(seed, &[round as u64]);
    let mut ids: Vec<ClientId> = index::sample(&mut rng, n_clients, k)
        .into_iter()
        .map(ClientId)
        .collect();
    ids.sort();
    Ok(ids)
}

/// Samples the distillation cross-entropy is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CePool {
    /// The replay pool after the joiner's share is merged in.
    #[default]
    Merged,
    /// Only the joiner's samples of the new classes.
    NewClasses,
}

/// Late-join settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinConfig {
    pub kd: KdConfig,
    pub ce_pool: CePool,
    /// Rounds during which new rows are aggregated from owners only; 0
    /// disables the gate.
    pub gate_rounds: usize,
}

/// What happened during one late-join integration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JoinReport {
    pub new_classes: Vec<ClassId>,
    pub kd: KdReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub global: HeadParams,
    pub pool: ReplayPool,
    pub round: usize,
    registry: Vec<ClassId>,
    pub gate: Option<RowGate>,
    pub aggregation: AggregationMode,
}

impl ServerState {
    pub fn new(global: HeadParams, pool: ReplayPool) -> Self {
        let registry = (0..global.n_classes() as ClassId).collect();
        Self {
            global,
            pool,
            round: 0,
            registry,
            gate: None,
            aggregation: AggregationMode::default(),
        }
    }

    pub fn registry(&self) -> &[ClassId] {
        &self.registry
    }

    /// Pre-trains the global model on the replay pool.
    pub fn warm_start(&mut self, cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>, ServerError> {
        if cfg.epochs == 0 {
            return Ok(Vec::new());
        }
        if self.pool.is_empty() {
            return Err(ServerError::Protocol("cannot warm start on an empty pool".into()));
        }
        let covered = self.pool.classes();
        if let Some(c) = self.registry.iter().find(|c| !covered.contains(c)) {
            return Err(ServerError::Protocol(format!(
                "registered class {c} has no samples in the pool"
            )));
        }
        let data = self.pool.to_dataset();
        train_centralized(&mut self.global, &data, cfg, &mut seed::rng(seed, &[]))
    }

    /// Aggregates one round of updates into the global model, honouring an
    /// active row gate, and advances the round counter.
    pub fn aggregate(&mut self, updates: &[LocalUpdate]) -> Result<(), ServerError> {
        let next = match self.gate.as_mut() {
            Some(gate) => row_gated_fedavg(updates, gate, &self.global)?,
            None => fedavg_with(updates, self.aggregation)?,
        };
        if self.gate.as_ref().is_some_and(|g| !g.is_active()) {
            self.gate = None;
        }
        self.global = next;
        self.round += 1;
        Ok(())
    }

    /// Integrates a late-joining client from its shared subset: prototypes
    /// for unseen classes, classifier expansion, head-only distillation
    /// against the pre-expansion model, pool merge, and a row gate owned by
    /// the joiner.
    pub fn integrate_new_client(
        &mut self,
        owner: ClientId,
        share: &EmbeddingDataset,
        cfg: &JoinConfig,
        seed: u64,
    ) -> Result<JoinReport, ServerError> {
        if share.is_empty() {
            return Err(ServerError::Protocol(format!("{owner} shared no samples")));
        }
        let known: BTreeSet<ClassId> = self.registry.iter().copied().collect();
        let new_classes: BTreeSet<ClassId> =
            share.present_classes().difference(&known).copied().collect();
        let mut report = JoinReport {
            new_classes: new_classes.iter().copied().collect(),
            kd: KdReport::default(),
        };
        if new_classes.is_empty() {
            self.pool.merge(share)?;
            return Ok(report);
        }

        let teacher = self.global.clone();
        let new_share = share.filter(|r| new_classes.contains(&r.label));
        let prototypes = compute_prototypes(&new_share, &self.global)?;
        let expanded = expand_classifier(&self.global, &prototypes, &self.registry)?;
        let old_pool = self.pool.to_dataset();
        let ce_pool = match cfg.ce_pool {
            CePool::Merged => EmbeddingDataset::concat(&[old_pool.clone(), share.clone()])?,
            CePool::NewClasses => new_share,
        };
        let (tuned, kd) = kd_finetune_head(&expanded, &teacher, &ce_pool, &old_pool, &cfg.kd, seed)?;

        self.global = tuned;
        self.registry.extend(new_classes.iter().copied());
        self.pool.merge(share)?;
        self.gate = if cfg.gate_rounds > 0 {
            Some(RowGate::new(new_classes, BTreeSet::from([owner]), cfg.gate_rounds)?)
        } else {
            None
        };
        report.kd = kd;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{collect_replay, gen_synthetic, partition_non_iid, SyntheticSpec};
    use crate::nnkernel::{head_forward, HeadDims};

    fn fixture() -> (Vec<EmbeddingDataset>, ServerState) {
        let ds = gen_synthetic(
            &SyntheticSpec {
                n_classes: 6,
                per_class: 30,
                d_in: 8,
                sigma: 0.5,
            },
            2,
        )
        .unwrap();
        let clients = partition_non_iid(&ds, 3, 2).unwrap().clients;
        let pool = collect_replay(&clients, 0.2, 2).unwrap();
        let dims = HeadDims {
            d_in: 8,
            d_model: 8,
            d_ff: 16,
            n_layers: 2,
            n_classes: 6,
        };
        let state = ServerState::new(HeadParams::init(dims, 2).unwrap(), pool);
        (clients, state)
    }

    fn warm(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
        }
    }

    #[test]
    fn participant_counts() {
        let all = select_participants(5, 1.0, 3, 0).unwrap();
        assert_eq!(all, (0..5).map(ClientId).collect::<Vec<_>>());
        assert_eq!(select_participants(5, 0.6, 3, 0).unwrap().len(), 3);
        assert_eq!(select_participants(5, 0.01, 3, 0).unwrap().len(), 1);
        assert_eq!(
            select_participants(5, 0.6, 8, 4).unwrap(),
            select_participants(5, 0.6, 8, 4).unwrap()
        );
        assert!(select_participants(5, 0.0, 1, 0).is_err());
    }

    #[test]
    fn selection_frequency_is_binomial() {
        let mut hits = [0usize; 5];
        for r in 0..1000 {
            for c in select_participants(5, 0.6, r, 17).unwrap() {
                hits[c.0] += 1;
            }
        }
        assert!(hits.iter().all(|&h| (550..=650).contains(&h)), "{hits:?}");
    }

    #[test]
    fn warm_start_zero_epochs_is_a_no_op() {
        let (_, mut s) = fixture();
        let before = s.global.clone();
        assert!(s.warm_start(&warm(0), 1).unwrap().is_empty());
        assert_eq!(s.global, before);
    }

    #[test]
    fn warm_start_reduces_pool_loss() {
        let (_, mut s) = fixture();
        let pool = s.pool.to_dataset().full_batch();
        let (before, _) = loss_and_gradients(&s.global, &pool.features, &pool.labels).unwrap();
        s.warm_start(&warm(5), 1).unwrap();
        let (after, _) = loss_and_gradients(&s.global, &pool.features, &pool.labels).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn warm_start_needs_pool_coverage() {
        let (_, mut s) = fixture();
        s.pool = ReplayPool::empty(8, vec!["a".into(); 6], 0.1);
        assert!(matches!(s.warm_start(&warm(1), 0), Err(ServerError::Protocol(_))));
    }

    #[test]
    fn join_without_new_classes_only_merges() {
        let (clients, mut s) = fixture();
        let before = s.global.clone();
        let pooled = s.pool.len();
        let share = clients[0].filter(|r| r.label == clients[0].records()[0].label);
        let cfg = JoinConfig {
            kd: KdConfig::default(),
            ce_pool: CePool::Merged,
            gate_rounds: 10,
        };
        let rep = s.integrate_new_client(ClientId(9), &share, &cfg, 0).unwrap();
        assert!(rep.new_classes.is_empty());
        assert_eq!(s.global, before);
        assert!(s.gate.is_none());
        assert_eq!(s.pool.len(), pooled + share.len());
    }

    #[test]
    fn join_expands_registry_and_installs_gate() {
        let (clients, _) = fixture();
        let plan_old: Vec<EmbeddingDataset> = clients
            .iter()
            .map(|c| c.filter(|r| r.label < 4))
            .filter(|c| !c.is_empty())
            .collect();
        let pool = collect_replay(&plan_old, 0.2, 0).unwrap();
        let dims = HeadDims {
            d_in: 8,
            d_model: 8,
            d_ff: 16,
            n_layers: 2,
            n_classes: 4,
        };
        let mut s = ServerState::new(HeadParams::init(dims, 5).unwrap(), pool);
        let joiner = EmbeddingDataset::concat(&clients)
            .unwrap()
            .filter(|r| r.label >= 4);
        let cfg = JoinConfig {
            kd: KdConfig {
                epochs: 2,
                ..KdConfig::default()
            },
            ce_pool: CePool::NewClasses,
            gate_rounds: 3,
        };
        let encoder_before: Vec<Vec<f64>> =
            s.global.encoder_tensors().iter().map(|(_, t)| t.to_vec()).collect();
        let rep = s.integrate_new_client(ClientId(3), &joiner, &cfg, 0).unwrap();
        assert_eq!(rep.new_classes, vec![4, 5]);
        assert_eq!(s.registry(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(s.global.n_classes(), 6);
        assert!(s.pool.classes().is_superset(&BTreeSet::from([4, 5])));
        let gate = s.gate.as_ref().unwrap();
        assert_eq!(gate.owners(), &BTreeSet::from([ClientId(3)]));
        assert_eq!(gate.rounds_remaining(), 3);
        let encoder_after: Vec<Vec<f64>> =
            s.global.encoder_tensors().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(encoder_before, encoder_after);
        assert_eq!(head_forward(&s.global, &joiner.full_batch().features).unwrap().logits.cols(), 6);
    }

    #[test]
    fn aggregation_expires_gate() {
        let (_, mut s) = fixture();
        s.gate = Some(RowGate::new(BTreeSet::from([5]), BTreeSet::from([ClientId(1)]), 2).unwrap());
        let up = |id| LocalUpdate {
            client: ClientId(id),
            params: s.global.clone(),
            n_samples: 1,
            steps: Vec::new(),
        };
        let ups = vec![up(0), up(1)];
        s.aggregate(&ups).unwrap();
        assert!(s.gate.is_some());
        s.aggregate(&ups).unwrap();
        assert!(s.gate.is_none());
        assert_eq!(s.round, 2);
    }
}
