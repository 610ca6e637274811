use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::clustering::{ProbeConfig, ProbeFeature, ReduceMode};
use crate::datasets::PartitionSpec;
use crate::economics::{CostParams, RewardModel};
use crate::energy::{EnergyParams, EnergyScenario};
use crate::error::{Error, Result};
use crate::models::{ModelKind, TrainingConfig};
use crate::selection::{Strategy, ThresholdRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Fedavg,
    Fedprox,
}

/// Proximal weight used by `fedprox` when none is configured.
pub const DEFAULT_PROX: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: usize,
    pub strategy: Strategy,
    pub aggregation: Aggregation,
    /// Model income `Rg` paid out over the planned rounds.
    pub total_income: f64,
    /// `Nr`; defaults to `rounds`.
    pub planned_rounds: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 40,
            strategy: Strategy::ClusterAuction,
            aggregation: Aggregation::Fedavg,
            total_income: 100.0,
            planned_rounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
}

/// Either a synthetic Gaussian mixture or a pair of IDX train/test files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_classes: usize,
    pub n_features: usize,
    /// Pool size per class that clients draw from.
    pub train_per_class: usize,
    /// Held-out global test set size per class.
    pub test_per_class: usize,
    pub separation: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n_classes: 10,
            n_features: 20,
            train_per_class: 1500,
            test_per_class: 200,
            separation: 2.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    /// `J`; defaults to `K`.
    pub clusters: Option<usize>,
    /// Sample window `s_mm`.
    pub window: usize,
    /// Probes averaged per client, `T0`.
    pub probes: usize,
    pub reduce: ReduceMode,
    pub feature: ProbeFeature,
    pub max_iters: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self { clusters: None, window: p.window, probes: p.repeats, reduce: p.mode, feature: p.feature, max_iters: p.max_iters }
    }
}

impl ClusteringConfig {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            window: self.window,
            repeats: self.probes,
            mode: self.reduce,
            feature: self.feature,
            max_iters: self.max_iters,
            ..ProbeConfig::default()
        }
    }
}

/// Energy costs in percent of battery capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// Computation drain per 100 samples.
    pub rate_percent: f64,
    pub recv_percent: f64,
    pub send_percent: f64,
    pub initial: EnergyScenario,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { rate_percent: 0.2, recv_percent: 0.1, send_percent: 0.1, initial: EnergyScenario::UniformFull }
    }
}

impl EnergyConfig {
    pub fn params(&self) -> EnergyParams {
        EnergyParams {
            per_100_samples: self.rate_percent / 100.0,
            recv_cost: self.recv_percent / 100.0,
            send_cost: self.send_percent / 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// `K = round(select_ratio * N)`.
    pub select_ratio: f64,
    pub threshold: ThresholdRule,
    /// Applies to auction rounds; other strategies pay by data size.
    pub reward_model: RewardModel,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { select_ratio: 0.1, threshold: ThresholdRule::ProvisionalWinners, reward_model: RewardModel::BidShare }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: RunConfig,
    pub data: DataConfig,
    pub partition: PartitionSpec,
    pub model: ModelKind,
    pub training: TrainingConfig,
    pub clustering: ClusteringConfig,
    pub energy: EnergyConfig,
    pub economics: CostParams,
    pub selection: SelectionConfig,
}

fn invalid(key: &str, value: impl std::fmt::Display, constraint: &str) -> Error {
    Error::Config(format!("{key} = {value}: {constraint}"))
}

fn section(name: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| Error::Config(format!("[{name}] {e}")))
}

impl ExperimentConfig {
    /// Number of winners per round.
    pub fn winners_per_round(&self) -> usize {
        (self.selection.select_ratio * self.partition.n_clients as f64).round() as usize
    }

    pub fn cluster_count(&self) -> usize {
        self.clustering.clusters.unwrap_or_else(|| self.winners_per_round())
    }

    pub fn planned_rounds(&self) -> usize {
        self.experiment.planned_rounds.unwrap_or(self.experiment.rounds)
    }

    /// Local training settings after applying the aggregation rule.
    pub fn local_training(&self) -> TrainingConfig {
        let prox_coefficient = match self.experiment.aggregation {
            Aggregation::Fedavg => 0.0,
            Aggregation::Fedprox if self.training.prox_coefficient > 0.0 => self.training.prox_coefficient,
            Aggregation::Fedprox => DEFAULT_PROX,
        };
        TrainingConfig { prox_coefficient, ..self.training.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let run = &self.experiment;
        if run.rounds == 0 {
            return Err(invalid("experiment.rounds", run.rounds, "must be >= 1"));
        }
        if !(run.total_income > 0.0 && run.total_income.is_finite()) {
            return Err(invalid("experiment.total_income", run.total_income, "must be > 0"));
        }
        if run.planned_rounds == Some(0) {
            return Err(invalid("experiment.planned_rounds", 0, "must be >= 1"));
        }
        let d = &self.data;
        if d.n_classes < 2 {
            return Err(invalid("data.n_classes", d.n_classes, "must be >= 2"));
        }
        if d.source == DataSource::Synthetic {
            if d.n_features < d.n_classes {
                return Err(invalid("data.n_features", d.n_features, "must be >= data.n_classes"));
            }
            if d.train_per_class == 0 || d.test_per_class == 0 {
                return Err(invalid("data.train_per_class", d.train_per_class, "train and test counts must be >= 1"));
            }
            if !(d.separation >= 0.0 && d.separation.is_finite()) {
                return Err(invalid("data.separation", d.separation, "must be >= 0"));
            }
        } else {
            for (key, path) in [
                ("data.train_images", &d.train_images),
                ("data.train_labels", &d.train_labels),
                ("data.test_images", &d.test_images),
                ("data.test_labels", &d.test_labels),
            ] {
                if path.is_none() {
                    return Err(invalid(key, "<missing>", "required when data.source = \"idx\""));
                }
            }
        }
        section("partition", self.partition.validate())?;
        if let ModelKind::Mlp { hidden: 0 } = self.model {
            return Err(invalid("model.hidden", 0, "must be >= 1"));
        }
        section("training", self.training.validate())?;
        let k = self.winners_per_round();
        let ratio = self.selection.select_ratio;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(invalid("selection.select_ratio", ratio, "must lie in (0,1]"));
        }
        if k == 0 {
            return Err(invalid("selection.select_ratio", ratio, "selects no clients"));
        }
        let j = self.cluster_count();
        if j == 0 || j > self.partition.n_clients {
            return Err(invalid("clustering.clusters", j, "must lie in [1, partition.n_clients]"));
        }
        if self.clustering.window == 0 || self.clustering.probes == 0 {
            return Err(invalid("clustering.window", self.clustering.window, "window and probes must be >= 1"));
        }
        let e = self.energy.params();
        section("energy", e.validate())?;
        section("energy", self.energy.initial.validate())?;
        section("economics", self.economics.validate())?;
        Ok(())
    }
}
