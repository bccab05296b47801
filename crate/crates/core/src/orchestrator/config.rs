use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::client::LocalTrainConfig;
use crate::datastore::SyntheticSpec;
use crate::nnkernel::{AdamWConfig, HeadDims};
use crate::seed;
use crate::server::{AggregationMode, CePool, JoinConfig, KdConfig, TrainConfig};

/// Where the embedding data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Every client owns a disjoint set of classes.
    #[default]
    NonIid,
    Iid,
}

/// Head shape apart from the class count, which comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadShape {
    pub d_in: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
}

impl Default for HeadShape {
    fn default() -> Self {
        let d = HeadDims::default();
        Self {
            d_in: d.d_in,
            d_model: d.d_model,
            d_ff: d.d_ff,
            n_layers: d.n_layers,
        }
    }
}

impl HeadShape {
    pub fn with_classes(&self, n_classes: usize) -> HeadDims {
        HeadDims {
            d_in: self.d_in,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            n_classes,
        }
    }
}

/// Independent seeds for every random stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub partition: u64,
    pub init: u64,
    pub replay: u64,
    pub warm: u64,
    pub selection: u64,
    pub clients: u64,
    pub kd: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let s = |k: u64| seed::derive(master, &[k]);
        Self {
            data: s(1),
            split: s(2),
            partition: s(3),
            init: s(4),
            replay: s(5),
            warm: s(6),
            selection: s(7),
            clients: s(8),
            kd: s(9),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_master(1)
    }
}

/// Settings for the late-join scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LateJoinSettings {
    pub join_round: usize,
    /// Clients present from the start; the joiner gets the next id.
    pub initial_clients: usize,
    /// The joiner owns the highest `new_classes` class ids.
    pub new_classes: usize,
}

impl Default for LateJoinSettings {
    fn default() -> Self {
        Self {
            join_round: 200,
            initial_clients: 4,
            new_classes: 6,
        }
    }
}

/// Settings for the periodic centralized fine-tune probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PulseSettings {
    pub every: usize,
    pub epochs: usize,
}

impl Default for PulseSettings {
    fn default() -> Self {
        Self { every: 10, epochs: 1 }
    }
}

/// Every protocol scalar of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub scenario: String,
    pub rounds: usize,
    pub n_clients: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub replay_ratio: f64,
    pub replay_enabled: bool,
    pub share_rate: f64,
    pub participant_rate: f64,
    pub warm_epochs: usize,
    pub gate_rounds: usize,
    pub kd_weight: f64,
    pub kd_temperature: f64,
    pub kd_epochs: usize,
    pub kd_ce_weight: f64,
    pub kd_ce_pool: CePool,
    pub persist_optimizer: bool,
    pub aggregation: AggregationMode,
    pub partition: PartitionMode,
    pub validation_fraction: f64,
    /// Train selected clients on the rayon pool.
    pub parallel_clients: bool,
    pub head: HeadShape,
    pub data: DataSource,
    pub seeds: Seeds,
    pub late_join: LateJoinSettings,
    pub pulse: PulseSettings,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            scenario: "default".into(),
            rounds: 500,
            n_clients: 5,
            local_epochs: 1,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            replay_ratio: 0.5,
            replay_enabled: true,
            share_rate: 0.01,
            participant_rate: 0.6,
            warm_epochs: 5,
            gate_rounds: 10,
            kd_weight: 0.5,
            kd_temperature: 2.0,
            kd_epochs: 20,
            kd_ce_weight: 1.0,
            kd_ce_pool: CePool::Merged,
            persist_optimizer: true,
            aggregation: AggregationMode::Mean,
            partition: PartitionMode::NonIid,
            validation_fraction: 0.2,
            parallel_clients: false,
            head: HeadShape::default(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            seeds: Seeds::default(),
            late_join: LateJoinSettings::default(),
            pulse: PulseSettings::default(),
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<(), OrchestratorError> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(OrchestratorError::Config(format!("{name} must be in (0, 1], got {v}")));
    }
    Ok(())
}

impl FedConfig {
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path)?;
        let cfg: FedConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), OrchestratorError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        unit_interval("share_rate", self.share_rate)?;
        unit_interval("participant_rate", self.participant_rate)?;
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return Err(OrchestratorError::Config(format!(
                "replay_ratio must be in [0, 1], got {}",
                self.replay_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(OrchestratorError::Config(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.n_clients == 0 || self.batch_size == 0 || self.local_epochs == 0 {
            return Err(OrchestratorError::Config(
                "n_clients, batch_size and local_epochs must be at least 1".into(),
            ));
        }
        if !self.kd_temperature.is_finite() || self.kd_temperature <= 0.0 {
            return Err(OrchestratorError::Config(format!(
                "kd_temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        Ok(())
    }

    /// Master-seed override: re-derives every stage seed.
    pub fn with_seed(mut self, master: u64) -> Self {
        self.seeds = Seeds::from_master(master);
        self
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn local_train(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            replay_ratio: self.replay_ratio,
            replay_enabled: self.replay_enabled,
            persist_optimizer: self.persist_optimizer,
            optimizer: self.optimizer(),
        }
    }

    pub fn warm_start(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.warm_epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer(),
        }
    }

    pub fn join(&self) -> JoinConfig {
        JoinConfig {
            kd: KdConfig {
                epochs: self.kd_epochs,
                batch_size: self.batch_size,
                kd_weight: self.kd_weight,
                ce_weight: self.kd_ce_weight,
                temperature: self.kd_temperature,
                optimizer: self.optimizer(),
            },
            ce_pool: self.kd_ce_pool,
            gate_rounds: self.gate_rounds,
        }
    }
}
