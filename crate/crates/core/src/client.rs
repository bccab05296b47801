//! One client's local training: private-data loss mixed with replay loss.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{sample_share, Batch, ClassId, DataError, EmbeddingDataset, ReplayPool};
use crate::nnkernel::{
    adamw_step, cross_entropy, head_backward, head_forward_traced, AdamWConfig, AdamWState,
    HeadParams, KernelError, Tensor2,
};
use crate::{seed, ClientId};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} has no local data")]
    EmptyData(ClientId),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Weight of the replay loss, λ in `(1 − λ)·L_local + λ·L_replay`.
    pub replay_ratio: f64,
    /// When false the replay path is never touched, whatever `replay_ratio` is.
    pub replay_enabled: bool,
    /// Keep AdamW moments across rounds instead of resetting them.
    pub persist_optimizer: bool,
    pub optimizer: AdamWConfig,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: 256,
            replay_ratio: 0.5,
            replay_enabled: true,
            persist_optimizer: true,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return Err(ClientError::Config(format!(
                "replay ratio must be in [0, 1], got {}",
                self.replay_ratio
            )));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(ClientError::Config(
                "local epochs and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn effective_ratio(&self) -> f64 {
        if self.replay_enabled {
            self.replay_ratio
        } else {
            0.0
        }
    }
}

/// Losses seen on one optimizer step. A term is `None` when its weight is
/// zero and it was therefore not evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub local: Option<f64>,
    pub replay: Option<f64>,
    pub total: f64,
}

/// What a client uploads after a round.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub client: ClientId,
    pub params: HeadParams,
    pub n_samples: usize,
    pub steps: Vec<StepLoss>,
}

impl LocalUpdate {
    pub fn mean_loss(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.total).sum::<f64>() / self.steps.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: ClientId,
    local_data: EmbeddingDataset,
    local_classes: BTreeSet<ClassId>,
    params: Option<HeadParams>,
    optimizer: Option<AdamWState>,
    shuffle_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
}

impl ClientState {
    /// `stream_seed` is the master seed for client streams; each client derives
    /// its own shuffling and replay streams from it and its id.
    pub fn new(id: ClientId, local_data: EmbeddingDataset, stream_seed: u64) -> Result<Self, ClientError> {
        if local_data.is_empty() {
            return Err(ClientError::EmptyData(id));
        }
        Ok(Self {
            id,
            local_classes: local_data.present_classes(),
            local_data,
            params: None,
            optimizer: None,
            shuffle_rng: seed::rng(stream_seed, &[id.0 as u64, 0]),
            replay_rng: seed::rng(stream_seed, &[id.0 as u64, 1]),
        })
    }

    pub fn local_data(&self) -> &EmbeddingDataset {
        &self.local_data
    }

    pub fn local_classes(&self) -> &BTreeSet<ClassId> {
        &self.local_classes
    }

    /// Parameters after the most recent round, if any.
    pub fn params(&self) -> Option<&HeadParams> {
        self.params.as_ref()
    }

    pub fn optimizer(&self) -> Option<&AdamWState> {
        self.optimizer.as_ref()
    }

    /// Pool classes this client has no local data for.
    pub fn missing_classes(&self, pool: &ReplayPool) -> BTreeSet<ClassId> {
        pool.classes()
            .difference(&self.local_classes)
            .copied()
            .collect()
    }
}

/// One optimizer step on `(1 − λ)·CE(private) + λ·CE(replay)`.
///
/// Both batches go through a single forward pass; their logit gradients are
/// scaled by the mixing weights before back-propagation. A side whose weight
/// is zero is skipped entirely.
pub fn train_step(
    params: &mut HeadParams,
    optimizer: &mut AdamWState,
    private: &Batch,
    replay: Option<&Batch>,
    replay_ratio: f64,
) -> Result<StepLoss, ClientError> {
    let use_local = replay_ratio < 1.0;
    let use_replay = replay_ratio > 0.0 && replay.is_some_and(|b| !b.is_empty());
    let empty = Tensor2::zeros(0, private.features.cols());
    let local_x = if use_local { &private.features } else { &empty };
    let replay_x = match replay {
        Some(b) if use_replay => &b.features,
        _ => &empty,
    };
    let n_local = local_x.rows();
    if n_local + replay_x.rows() == 0 {
        return Err(ClientError::Config("training step with no samples".into()));
    }

    let inputs = Tensor2::vstack(local_x, replay_x)?;
    let trace = head_forward_traced(params, &inputs)?;
    let logits = trace.logits();
    let n_classes = logits.cols();

    let mut dlogits = Tensor2::zeros(0, n_classes);
    let mut loss = StepLoss {
        local: None,
        replay: None,
        total: 0.0,
    };
    if use_local {
        let (l, mut g) = cross_entropy(&logits.slice_rows(0, n_local), &private.labels)?;
        let w = 1.0 - replay_ratio;
        g.data_mut().iter_mut().for_each(|v| *v *= w);
        dlogits = g;
        loss.local = Some(l);
        loss.total += w * l;
    }
    if use_replay {
        let rb = replay.expect("checked above");
        let (l, mut g) = cross_entropy(&logits.slice_rows(n_local, logits.rows()), &rb.labels)?;
        g.data_mut().iter_mut().for_each(|v| *v *= replay_ratio);
        dlogits = Tensor2::vstack(&dlogits, &g)?;
        loss.replay = Some(l);
        loss.total += replay_ratio * l;
    }

    let grads = head_backward(params, &trace, &dlogits)?;
    adamw_step(params, &grads, optimizer)?;
    Ok(loss)
}

/// Runs `local_epochs` passes over the client's data starting from
/// `global`, pairing every private batch with an equally sized replay batch
/// drawn from the classes this client lacks.
pub fn local_train_round(
    state: &mut ClientState,
    global: &HeadParams,
    pool: &ReplayPool,
    cfg: &LocalTrainConfig,
) -> Result<LocalUpdate, ClientError> {
    cfg.validate()?;
    if state.local_data.is_empty() {
        return Err(ClientError::EmptyData(state.id));
    }
    if global.dims().d_in != state.local_data.d_in() {
        return Err(ClientError::Kernel(KernelError::Dimension(format!(
            "{} has {}-wide features, model expects {}",
            state.id,
            state.local_data.d_in(),
            global.dims().d_in
        ))));
    }
    let lambda = cfg.effective_ratio();
    let mut params = global.clone();
    let lens: Vec<usize> = params.tensors().iter().map(|s| s.len()).collect();
    let mut optimizer = match state.optimizer.take() {
        Some(mut opt) if cfg.persist_optimizer => {
            opt.config = cfg.optimizer;
            opt.resize(&lens);
            opt
        }
        _ => AdamWState::new(cfg.optimizer, &lens),
    };
    let missing = if lambda > 0.0 {
        state.missing_classes(pool)
    } else {
        BTreeSet::new()
    };

    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..state.local_data.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut state.shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let private = state.local_data.batch(chunk);
            let replay = if lambda > 0.0 {
                Some(pool.sample_batch(private.len(), &missing, &mut state.replay_rng)?)
            } else {
                None
            };
            steps.push(train_step(
                &mut params,
                &mut optimizer,
                &private,
                replay.as_ref(),
                lambda,
            )?);
        }
    }

    state.optimizer = Some(optimizer);
    state.params = Some(params.clone());
    Ok(LocalUpdate {
        client: state.id,
        params,
        n_samples: state.local_data.len(),
        steps,
    })
}

/// The stratified subset this client uploads to the replay pool.
pub fn extract_share(
    state: &ClientState,
    share_rate: f64,
    seed: u64,
) -> Result<EmbeddingDataset, ClientError> {
    let mut rng = seed::rng(seed, &[state.id.0 as u64]);
    Ok(sample_share(&state.local_data, share_rate, &mut rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{collect_replay, gen_synthetic, partition_non_iid, SyntheticSpec};
    use crate::nnkernel::{head_forward, HeadDims};

    struct Fixture {
        clients: Vec<EmbeddingDataset>,
        pool: ReplayPool,
        global: HeadParams,
    }

    fn fixture() -> Fixture {
        let ds = gen_synthetic(
            &SyntheticSpec {
                n_classes: 6,
                per_class: 20,
                d_in: 8,
                sigma: 0.3,
            },
            1,
        )
        .unwrap();
        let clients = partition_non_iid(&ds, 3, 1).unwrap().clients;
        let pool = collect_replay(&clients, 0.1, 1).unwrap();
        let global = HeadParams::init(
            HeadDims {
                d_in: 8,
                d_model: 8,
                d_ff: 16,
                n_layers: 2,
                n_classes: 6,
            },
            1,
        )
        .unwrap();
        Fixture {
            clients,
            pool,
            global,
        }
    }

    fn cfg(lambda: f64) -> LocalTrainConfig {
        LocalTrainConfig {
            batch_size: 16,
            replay_ratio: lambda,
            ..LocalTrainConfig::default()
        }
    }

    #[test]
    fn zero_ratio_matches_disabled_replay_bitwise() {
        let f = fixture();
        let mut a = ClientState::new(ClientId(0), f.clients[0].clone(), 7).unwrap();
        let mut b = a.clone();
        let ua = local_train_round(&mut a, &f.global, &f.pool, &cfg(0.0)).unwrap();
        let disabled = LocalTrainConfig {
            replay_enabled: false,
            replay_ratio: 0.5,
            ..cfg(0.5)
        };
        let ub = local_train_round(&mut b, &f.global, &f.pool, &disabled).unwrap();
        assert_eq!(ua.params, ub.params);
        assert!(ua.steps.iter().all(|s| s.replay.is_none()));
    }

    #[test]
    fn unit_ratio_ignores_private_labels() {
        let f = fixture();
        let data = &f.clients[1];
        let mut labels: Vec<ClassId> = data.records().iter().map(|r| r.label).collect();
        labels.rotate_left(5);
        let permuted = data.with_records(
            data.records()
                .iter()
                .zip(&labels)
                .map(|(r, &l)| crate::datastore::EmbeddingRecord {
                    label: l,
                    vector: r.vector.clone(),
                })
                .collect(),
        );
        let mut a = ClientState::new(ClientId(1), data.clone(), 3).unwrap();
        let mut b = ClientState::new(ClientId(1), permuted, 3).unwrap();
        let ua = local_train_round(&mut a, &f.global, &f.pool, &cfg(1.0)).unwrap();
        let ub = local_train_round(&mut b, &f.global, &f.pool, &cfg(1.0)).unwrap();
        assert_eq!(ua.params, ub.params);
    }

    #[test]
    fn half_ratio_total_recomposes_from_separate_losses() {
        let f = fixture();
        let private = f.clients[0].batch(&(0..16).collect::<Vec<_>>());
        let replay = f
            .pool
            .sample_batch(16, &BTreeSet::from([3, 4]), &mut seed::rng(0, &[]))
            .unwrap();
        let before = f.global.clone();
        let mut params = f.global.clone();
        let mut opt = AdamWState::for_params(AdamWConfig::default(), &params);
        let step = train_step(&mut params, &mut opt, &private, Some(&replay), 0.5).unwrap();

        let l_local = cross_entropy(&head_forward(&before, &private.features).unwrap().logits, &private.labels)
            .unwrap()
            .0;
        let l_replay = cross_entropy(&head_forward(&before, &replay.features).unwrap().logits, &replay.labels)
            .unwrap()
            .0;
        assert!((step.total - (0.5 * l_local + 0.5 * l_replay)).abs() < 1e-12);
        assert!((step.local.unwrap() - l_local).abs() < 1e-12);
        assert!((step.replay.unwrap() - l_replay).abs() < 1e-12);
    }

    #[test]
    fn replay_batches_only_hold_missing_classes() {
        let f = fixture();
        let state = ClientState::new(ClientId(2), f.clients[2].clone(), 0).unwrap();
        let missing = state.missing_classes(&f.pool);
        assert!(missing.is_disjoint(state.local_classes()));
        assert_eq!(missing.len(), 4);
        let b = f.pool.sample_batch(64, &missing, &mut seed::rng(1, &[])).unwrap();
        assert!(b.labels.iter().all(|l| missing.contains(l)));
    }

    #[test]
    fn identical_clients_produce_identical_updates() {
        let f = fixture();
        let mut a = ClientState::new(ClientId(0), f.clients[0].clone(), 11).unwrap();
        let mut b = ClientState::new(ClientId(0), f.clients[0].clone(), 11).unwrap();
        let ua = local_train_round(&mut a, &f.global, &f.pool, &cfg(0.5)).unwrap();
        let ub = local_train_round(&mut b, &f.global, &f.pool, &cfg(0.5)).unwrap();
        assert_eq!(ua.params, ub.params);
        assert_ne!(ua.params, f.global);
        // 40 records at batch 16, last partial batch kept
        assert_eq!(ua.steps.len(), 3);
    }

    #[test]
    fn invalid_ratio_and_empty_data_are_rejected() {
        let f = fixture();
        let mut s = ClientState::new(ClientId(0), f.clients[0].clone(), 0).unwrap();
        assert!(matches!(
            local_train_round(&mut s, &f.global, &f.pool, &cfg(1.5)),
            Err(ClientError::Config(_))
        ));
        let empty = f.clients[0].with_records(Vec::new());
        assert!(matches!(
            ClientState::new(ClientId(4), empty, 0),
            Err(ClientError::EmptyData(ClientId(4)))
        ));
    }

    #[test]
    fn share_extraction_copies_records() {
        let f = fixture();
        let s = ClientState::new(ClientId(0), f.clients[0].clone(), 0).unwrap();
        assert_eq!(extract_share(&s, 1.0, 0).unwrap(), f.clients[0]);
        let part = extract_share(&s, 0.1, 0).unwrap();
        assert_eq!(part.len(), 4);
        assert!(part.records().iter().all(|r| f.clients[0].records().contains(r)));
    }
}
