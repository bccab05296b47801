//! Experiment drivers: plain federation, late join and the fine-tune pulse
//! probe.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::transfer_bytes;
use super::{evaluate, DataSource, EvalResult, FedConfig, OrchestratorError, PartitionMode, RoundReport};
use crate::client::{extract_share, local_train_round, ClientState, LocalUpdate};
use crate::datastore::{
    collect_replay, gen_synthetic, load_dataset, partition_iid, partition_non_iid,
    stratified_split, ClassId, EmbeddingDataset,
};
use crate::nnkernel::HeadParams;
use crate::server::{select_participants, train_centralized, ServerState, TrainConfig};
use crate::{seed, ClientId};

/// Loads or generates the dataset a config points at.
pub fn load_data(cfg: &FedConfig) -> Result<EmbeddingDataset, OrchestratorError> {
    Ok(match &cfg.data {
        DataSource::Synthetic(spec) => {
            let mut ds = gen_synthetic(spec, cfg.seeds.data)?;
            ds.provenance = format!("synthetic sigma={} seed={}", spec.sigma, cfg.seeds.data);
            ds
        }
        DataSource::File { path } => load_dataset(path)?,
    })
}

/// Stratified (train, validation) split.
pub fn split_data(
    cfg: &FedConfig,
    data: &EmbeddingDataset,
) -> Result<(EmbeddingDataset, EmbeddingDataset), OrchestratorError> {
    Ok(stratified_split(data, cfg.validation_fraction, cfg.seeds.split)?)
}

pub fn partition(
    cfg: &FedConfig,
    train: &EmbeddingDataset,
    n_clients: usize,
) -> Result<Vec<EmbeddingDataset>, OrchestratorError> {
    Ok(match cfg.partition {
        PartitionMode::NonIid => partition_non_iid(train, n_clients, cfg.seeds.partition)?.clients,
        PartitionMode::Iid => partition_iid(train, n_clients, cfg.seeds.partition)?,
    })
}

/// Server, clients and validation data of one run.
pub struct Federation {
    pub cfg: FedConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub validation: EmbeddingDataset,
}

impl Federation {
    /// Builds the replay pool from every client's share and initializes a
    /// model over `n_classes` classes. No training happens yet.
    pub fn new(
        cfg: &FedConfig,
        client_data: Vec<EmbeddingDataset>,
        validation: EmbeddingDataset,
        n_classes: usize,
    ) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let first = client_data
            .first()
            .ok_or_else(|| OrchestratorError::Config("no client data".into()))?;
        if first.d_in() != cfg.head.d_in {
            return Err(OrchestratorError::Config(format!(
                "data has {}-wide embeddings but the head expects {}",
                first.d_in(),
                cfg.head.d_in
            )));
        }
        let pool = collect_replay(&client_data, cfg.share_rate, cfg.seeds.replay)?;
        let global = HeadParams::init(cfg.head.with_classes(n_classes), cfg.seeds.init)?;
        let mut server = ServerState::new(global, pool);
        server.aggregation = cfg.aggregation;
        let clients = client_data
            .into_iter()
            .enumerate()
            .map(|(i, ds)| ClientState::new(ClientId(i), ds, cfg.seeds.clients))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            server,
            clients,
            validation,
        })
    }

    /// Accuracy on the validation samples of registered classes.
    pub fn evaluate(&self) -> Result<EvalResult, OrchestratorError> {
        let registered = self.server.global.n_classes() as ClassId;
        let val = self.validation.filter(|r| r.label < registered);
        let mut res = evaluate(&self.server.global, &val)?;
        res.per_class.truncate(registered as usize);
        res.counts.truncate(registered as usize);
        Ok(res)
    }

    fn report(
        &self,
        participants: Vec<ClientId>,
        loss: f64,
        started: Instant,
    ) -> Result<RoundReport, OrchestratorError> {
        let eval = self.evaluate()?;
        let p = self.server.global.param_count();
        let bytes = participants.len() as u64 * transfer_bytes(p);
        Ok(RoundReport {
            round: self.server.round,
            participants,
            accuracy: eval.accuracy,
            per_class: eval.per_class,
            loss,
            bytes_up: bytes,
            bytes_down: bytes,
            param_count: p,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Pre-trains on the replay pool; returns the round-0 report.
    pub fn warm_start(&mut self) -> Result<RoundReport, OrchestratorError> {
        let started = Instant::now();
        let losses = self.server.warm_start(&self.cfg.warm_start(), self.cfg.seeds.warm)?;
        self.report(Vec::new(), losses.last().copied().unwrap_or(f64::NAN), started)
    }

    /// One round: select, sync down, local training, upload, aggregate.
    pub fn run_round(&mut self) -> Result<RoundReport, OrchestratorError> {
        let round = self.server.round + 1;
        self.step(round).map_err(|e| OrchestratorError::Round {
            round,
            source: Box::new(e),
        })
    }

    fn step(&mut self, round: usize) -> Result<RoundReport, OrchestratorError> {
        let started = Instant::now();
        let selected = select_participants(
            self.clients.len(),
            self.cfg.participant_rate,
            round,
            self.cfg.seeds.selection,
        )?;
        let local = self.cfg.local_train();
        let (global, pool) = (&self.server.global, &self.server.pool);
        let chosen = self.clients.iter_mut().filter(|c| selected.contains(&c.id));
        let updates: Vec<LocalUpdate> = if self.cfg.parallel_clients {
            chosen
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|c| local_train_round(c, global, pool, &local))
                .collect::<Result<_, _>>()?
        } else {
            chosen
                .map(|c| local_train_round(c, global, pool, &local))
                .collect::<Result<_, _>>()?
        };
        let loss = updates.iter().map(|u| u.mean_loss()).sum::<f64>() / updates.len() as f64;
        self.server.aggregate(&updates)?;
        self.report(selected, loss, started)
    }

    /// Union of every client's private data.
    pub fn centralized_data(&self) -> Result<EmbeddingDataset, OrchestratorError> {
        let parts: Vec<EmbeddingDataset> =
            self.clients.iter().map(|c| c.local_data().clone()).collect();
        Ok(EmbeddingDataset::concat(&parts)?)
    }
}

/// Reports of a run, starting with the post-warm-start row 0.
#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub reports: Vec<RoundReport>,
    pub final_params: HeadParams,
}

impl SimOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.reports.last().map(|r| r.accuracy).unwrap_or(0.0)
    }

    /// Mean accuracy over the last `n` federated rounds.
    pub fn tail_accuracy(&self, n: usize) -> f64 {
        let rounds = &self.reports[1.min(self.reports.len())..];
        let tail = &rounds[rounds.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.accuracy).sum::<f64>() / tail.len() as f64
    }
}

/// Full protocol: split, partition, pool collection, warm start, `rounds`
/// federated rounds.
pub fn run_simulation(cfg: &FedConfig, data: &EmbeddingDataset) -> Result<SimOutcome, OrchestratorError> {
    let (train, validation) = split_data(cfg, data)?;
    let clients = partition(cfg, &train, cfg.n_clients)?;
    let mut fed = Federation::new(cfg, clients, validation, data.n_classes())?;
    let mut reports = vec![fed.warm_start()?];
    for _ in 0..cfg.rounds {
        reports.push(fed.run_round()?);
    }
    Ok(SimOutcome {
        reports,
        final_params: fed.server.global,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinSummary {
    pub join_round: usize,
    pub new_classes: Vec<ClassId>,
    /// Accuracy over the old classes with the pre-join model.
    pub accuracy_before: f64,
    /// Accuracy over all classes right after integration.
    pub accuracy_after_join: f64,
    /// Old-class validation accuracy before expansion and after distillation.
    pub old_class_accuracy_before: f64,
    pub old_class_accuracy_after_kd: f64,
    pub new_class_accuracy_after_kd: f64,
    pub kd_first_kl: Option<f64>,
    pub kd_last_kl: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LateJoinOutcome {
    pub reports: Vec<RoundReport>,
    pub join: JoinSummary,
    pub final_params: HeadParams,
}

impl LateJoinOutcome {
    pub fn accuracy_at(&self, round: usize) -> Option<f64> {
        self.reports.iter().find(|r| r.round == round).map(|r| r.accuracy)
    }

    /// Best accuracy among rounds `1..=join_round`.
    pub fn pre_join_peak(&self) -> f64 {
        self.reports
            .iter()
            .filter(|r| r.round >= 1 && r.round <= self.join.join_round)
            .map(|r| r.accuracy)
            .fold(0.0, f64::max)
    }
}

/// Splits `data` into the initial clients' share (all but the highest
/// `new_classes` class ids, partitioned) and the joiner's data, then runs
/// [`run_late_join_with`].
pub fn run_late_join(cfg: &FedConfig, data: &EmbeddingDataset) -> Result<LateJoinOutcome, OrchestratorError> {
    let lj = cfg.late_join;
    let c = data.n_classes();
    if lj.new_classes == 0 || lj.new_classes >= c {
        return Err(OrchestratorError::Config(format!(
            "late join needs between 1 and {} new classes, got {}",
            c - 1,
            lj.new_classes
        )));
    }
    let first_new = (c - lj.new_classes) as ClassId;
    let (train, validation) = split_data(cfg, data)?;
    let old = train.filter(|r| r.label < first_new);
    let new = train.filter(|r| r.label >= first_new);
    let clients = partition(cfg, &old, lj.initial_clients)?;
    run_late_join_with(cfg, clients, new, validation, first_new as usize)
}

/// Runs `join_round` rounds with `initial` clients over `n_old_classes`
/// classes, integrates `new_client`, and continues to `cfg.rounds`.
pub fn run_late_join_with(
    cfg: &FedConfig,
    initial: Vec<EmbeddingDataset>,
    new_client: EmbeddingDataset,
    validation: EmbeddingDataset,
    n_old_classes: usize,
) -> Result<LateJoinOutcome, OrchestratorError> {
    let join_round = cfg.late_join.join_round;
    if new_client.is_empty() {
        return Err(OrchestratorError::Config("late-joining client has no data".into()));
    }
    if join_round >= cfg.rounds {
        return Err(OrchestratorError::Config(format!(
            "join round {join_round} must precede the last round {}",
            cfg.rounds
        )));
    }
    let mut fed = Federation::new(cfg, initial, validation, n_old_classes)?;
    let mut reports = vec![fed.warm_start()?];
    for _ in 0..join_round {
        reports.push(fed.run_round()?);
    }
    let accuracy_before = fed.evaluate()?;
    let old_classes = 0..n_old_classes;

    let joiner_id = ClientId(fed.clients.len());
    let joiner = ClientState::new(joiner_id, new_client, cfg.seeds.clients)?;
    let share = extract_share(&joiner, cfg.share_rate, cfg.seeds.replay)?;
    let join = fed
        .server
        .integrate_new_client(joiner_id, &share, &cfg.join(), cfg.seeds.kd)?;
    fed.clients.push(joiner);
    let after = fed.evaluate()?;
    let n_total = fed.server.global.n_classes();

    let summary = JoinSummary {
        join_round,
        new_classes: join.new_classes.clone(),
        accuracy_before: accuracy_before.accuracy,
        accuracy_after_join: after.accuracy,
        old_class_accuracy_before: accuracy_before.accuracy_over(old_classes.clone()),
        old_class_accuracy_after_kd: after.accuracy_over(old_classes),
        new_class_accuracy_after_kd: after.accuracy_over(n_old_classes..n_total),
        kd_first_kl: join.kd.first_kl(),
        kd_last_kl: join.kd.last_kl(),
    };
    for _ in join_round..cfg.rounds {
        reports.push(fed.run_round()?);
    }
    Ok(LateJoinOutcome {
        reports,
        join: summary,
        final_params: fed.server.global,
    })
}

/// One centralized fine-tune event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub round: usize,
    /// Accuracy after that round's aggregation, before the fine-tune.
    pub before: f64,
    pub after: f64,
    /// Lowest accuracy over the following rounds up to the next fine-tune.
    pub trough: Option<f64>,
}

impl Pulse {
    pub fn rose(&self) -> bool {
        self.after > self.before
    }

    pub fn fell(&self) -> bool {
        self.trough.is_some_and(|t| t < self.after)
    }
}

#[derive(Clone, Debug)]
pub struct PulseOutcome {
    pub reports: Vec<RoundReport>,
    pub pulses: Vec<Pulse>,
}

impl PulseOutcome {
    /// Fraction of pulses with a following window that rose and then fell.
    pub fn pulse_fraction(&self) -> f64 {
        let complete: Vec<&Pulse> = self.pulses.iter().filter(|p| p.trough.is_some()).collect();
        if complete.is_empty() {
            return 0.0;
        }
        complete.iter().filter(|p| p.rose() && p.fell()).count() as f64 / complete.len() as f64
    }

    /// Mean drop from each pulse peak to its trough.
    pub fn mean_degradation(&self) -> f64 {
        let drops: Vec<f64> = self
            .pulses
            .iter()
            .filter_map(|p| p.trough.map(|t| p.after - t))
            .collect();
        if drops.is_empty() {
            return 0.0;
        }
        drops.iter().sum::<f64>() / drops.len() as f64
    }
}

/// Federated rounds without replay, with a centralized fine-tune of the
/// global model on all client data every `cfg.pulse.every` rounds.
pub fn run_pulse_probe(cfg: &FedConfig, data: &EmbeddingDataset) -> Result<PulseOutcome, OrchestratorError> {
    if cfg.replay_enabled && cfg.replay_ratio > 0.0 {
        return Err(OrchestratorError::Config(
            "the pulse probe runs without replay; set replay_ratio to 0".into(),
        ));
    }
    let every = cfg.pulse.every;
    if every == 0 {
        return Err(OrchestratorError::Config("pulse interval must be positive".into()));
    }
    let (train, validation) = split_data(cfg, data)?;
    let clients = partition(cfg, &train, cfg.n_clients)?;
    let mut fed = Federation::new(cfg, clients, validation, data.n_classes())?;
    let central = fed.centralized_data()?;
    let tune = TrainConfig {
        epochs: cfg.pulse.epochs,
        ..cfg.warm_start()
    };

    let mut reports = vec![fed.warm_start()?];
    let mut pulses: Vec<Pulse> = Vec::new();
    for _ in 0..cfg.rounds {
        let mut report = fed.run_round()?;
        if let Some(p) = pulses.last_mut().filter(|p| report.round <= p.round + every) {
            p.trough = Some(p.trough.map_or(report.accuracy, |t: f64| t.min(report.accuracy)));
        }
        if report.round % every == 0 {
            let before = report.accuracy;
            let started = Instant::now();
            let mut rng = seed::rng(cfg.seeds.warm, &[report.round as u64]);
            train_centralized(&mut fed.server.global, &central, &tune, &mut rng)?;
            let eval = fed.evaluate()?;
            report.accuracy = eval.accuracy;
            report.per_class = eval.per_class;
            report.wall_ms += started.elapsed().as_secs_f64() * 1e3;
            pulses.push(Pulse {
                round: report.round,
                before,
                after: report.accuracy,
                trough: None,
            });
        }
        reports.push(report);
    }
    Ok(PulseOutcome { reports, pulses })
}
