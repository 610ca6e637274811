//! The communication-round loop.
//!
//! Each round: select winners, train them locally from the broadcast model,
//! average their parameters by train-set size, drain their batteries, pay
//! them, and evaluate the new global model on the held-out test set.

mod config;
mod trace;

use rayon::prelude::*;

pub use config::{
    Aggregation, ClusteringConfig, DataConfig, DataSource, EnergyConfig, ExperimentConfig, RunConfig, SelectionConfig,
    DEFAULT_PROX,
};
pub use trace::{write_auction_csv, write_energy_csv, write_metrics_csv, EnergyRow, MetricRow, TraceRow};

use crate::clustering::{cluster_clients, Clustering};
use crate::datasets::{partition, read_idx, synth_gaussian, ClientDataset, LabeledDataset, PartitionSpec};
use crate::economics::{settle_rewards, RewardLedger, RewardModel, Settlement, WinnerClaim};
use crate::energy::{compute_drain, energy_balance, init_energy, EnergyParams, EnergyState};
use crate::error::{domain, Error, Result};
use crate::models::{evaluate, local_train, loss, ModelParams, ModelShape, TrainingConfig};
use crate::rng::{stream_seed, Stream};
use crate::selection::{
    check_cost_oracle, select_cluster_auction, select_cluster_random, select_random, Candidate, RoundSelection, Strategy,
};

/// Weighted coordinate-wise mean, accumulated in the order given.
pub fn aggregate(locals: &[(ModelParams, f64)]) -> Result<ModelParams> {
    let (first, _) = locals.first().ok_or_else(|| domain("nothing to aggregate"))?;
    if locals.iter().any(|(p, w)| !(*w > 0.0) || p.shape() != first.shape()) {
        return Err(domain("aggregation weights must be positive and shapes equal"));
    }
    let total: f64 = locals.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(domain(format!("aggregation weights sum to {total}, not 1")));
    }
    let mut out = vec![0.0; first.len()];
    for (p, w) in locals {
        for (o, v) in out.iter_mut().zip(p.values()) {
            *o += w * v;
        }
    }
    ModelParams::from_values(first.shape().clone(), out)
}

/// Pooled training data and the global test set.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &cfg.data;
    let seed = cfg.experiment.seed;
    match d.source {
        DataSource::Synthetic => Ok((
            synth_gaussian(d.n_classes, d.train_per_class, d.n_features, d.separation, stream_seed(seed, Stream::SynthTrain, &[]))?,
            synth_gaussian(d.n_classes, d.test_per_class, d.n_features, d.separation, stream_seed(seed, Stream::SynthTest, &[]))?,
        )),
        DataSource::Idx => {
            let path = |p: &Option<std::path::PathBuf>| p.clone().ok_or_else(|| Error::Config("missing IDX path".into()));
            let train = read_idx(path(&d.train_images)?, path(&d.train_labels)?)?;
            let test = read_idx(path(&d.test_images)?, path(&d.test_labels)?)?;
            if train.n_features() != test.n_features() {
                return Err(Error::Consistency("train and test images differ in size".into()));
            }
            let classes = train.n_classes().max(test.n_classes()).max(d.n_classes);
            Ok((widen_classes(train, classes)?, widen_classes(test, classes)?))
        }
    }
}

/// Splits `pool` across clients exactly as a run with `cfg` would.
pub fn partition_clients(cfg: &ExperimentConfig, pool: &LabeledDataset) -> Result<Vec<ClientDataset>> {
    let spec = PartitionSpec { seed: stream_seed(cfg.experiment.seed, Stream::Partition, &[]), ..cfg.partition.clone() };
    partition(pool, &spec)
}

fn widen_classes(data: LabeledDataset, classes: usize) -> Result<LabeledDataset> {
    if data.n_classes() == classes {
        return Ok(data);
    }
    LabeledDataset::new(data.features().to_vec(), data.n_features(), data.labels().to_vec(), classes)
}

/// One completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub checksum: u64,
    pub winners: Vec<usize>,
    pub accuracy: f64,
    pub test_loss: f64,
    /// Mean over winners of the trained local model's loss on its own train split.
    pub train_loss: f64,
    pub energy_std: f64,
    pub mean_bid: Option<f64>,
    pub server_reward: f64,
    pub clients_reward_sum: f64,
    pub s_min: Option<usize>,
    pub backfilled: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub auction: Vec<TraceRow>,
    pub energy: Vec<EnergyRow>,
    pub final_params: ModelParams,
    pub clustering: Option<Clustering>,
    pub ledger: RewardLedger,
    /// Why the run stopped early, if it did.
    pub halted: Option<String>,
}

impl ExperimentOutcome {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.records.iter().map(MetricRow::from).collect()
    }
}

/// Live state of one simulation.
pub struct Federation {
    config: ExperimentConfig,
    training: TrainingConfig,
    energy_params: EnergyParams,
    clients: Vec<ClientDataset>,
    test: LabeledDataset,
    energy: EnergyState,
    participations: Vec<u32>,
    clustering: Option<Clustering>,
    global: ModelParams,
    ledger: RewardLedger,
    k: usize,
    auction: Vec<TraceRow>,
    energy_rows: Vec<EnergyRow>,
    check_oracle: bool,
}

impl Federation {
    /// Partitions `pool`, draws batteries, initializes the model, and runs
    /// the clustering stage when the strategy needs it.
    pub fn new(config: &ExperimentConfig, pool: &LabeledDataset, test: LabeledDataset) -> Result<Self> {
        config.validate()?;
        let seed = config.experiment.seed;
        if pool.n_features() != test.n_features() || pool.n_classes() != test.n_classes() {
            return Err(Error::Consistency("training pool and test set disagree in shape".into()));
        }
        let clients = partition_clients(config, pool)?;
        let n = clients.len();
        let energy = init_energy(n, config.energy.initial, stream_seed(seed, Stream::Energy, &[]))?;
        let shape = ModelShape::for_kind(config.model, pool.n_features(), pool.n_classes())?;
        let global = ModelParams::init(shape, stream_seed(seed, Stream::ModelInit, &[]));
        let k = config.winners_per_round();
        let clustering = if config.experiment.strategy.uses_clusters() {
            Some(cluster_clients(
                &global,
                &clients,
                config.cluster_count(),
                &config.clustering.probe_config(),
                stream_seed(seed, Stream::Clustering, &[]),
            )?)
        } else {
            None
        };
        let energy_rows = energy_snapshot(0, &energy);
        Ok(Self {
            training: config.local_training(),
            energy_params: config.energy.params(),
            ledger: RewardLedger::new(n, config.experiment.total_income, config.planned_rounds()),
            participations: vec![0; n],
            config: config.clone(),
            clients,
            test,
            energy,
            clustering,
            global,
            k,
            auction: Vec::new(),
            energy_rows,
            check_oracle: true,
        })
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn clustering(&self) -> Option<&Clustering> {
        self.clustering.as_ref()
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn energy(&self) -> &EnergyState {
        &self.energy
    }

    pub fn participations(&self) -> &[u32] {
        &self.participations
    }

    /// Skips the per-round winner check against a cost sort.
    pub fn without_oracle(mut self) -> Self {
        self.check_oracle = false;
        self
    }

    fn candidates(&self) -> Vec<Candidate> {
        self.clients
            .iter()
            .map(|c| Candidate {
                client_id: c.id,
                samples: c.size,
                remaining: self.energy.remaining()[c.id],
                computation: compute_drain(c.size, &self.energy_params).computation,
                participations: self.participations[c.id],
            })
            .collect()
    }

    fn select(&self, round: usize) -> Result<RoundSelection> {
        let seed = stream_seed(self.config.experiment.seed, Stream::Selection, &[round as u64]);
        let cands = self.candidates();
        let clustering = || self.clustering.as_ref().ok_or_else(|| domain("strategy needs a clustering"));
        match self.config.experiment.strategy {
            Strategy::Random => select_random(&cands, self.k, round, seed),
            Strategy::ClusterRandom => select_cluster_random(clustering()?, &cands, self.k, round, seed),
            Strategy::ClusterAuction => select_cluster_auction(
                clustering()?,
                &cands,
                &self.config.economics,
                self.config.selection.threshold,
                self.k,
                round,
                seed,
            ),
        }
    }

    /// Runs round `round` (1-based). A selection shortfall comes back as
    /// [`Error::Selection`] with the state untouched.
    pub fn run_round(&mut self, round: usize) -> Result<RoundRecord> {
        let sel = self.select(round)?;
        if self.check_oracle && !sel.auction.is_empty() {
            check_cost_oracle(&sel)?;
        }
        let seed = self.config.experiment.seed;
        let trained: Vec<(usize, ModelParams, f64)> = sel
            .winners
            .par_iter()
            .map(|&id| {
                let client = &self.clients[id];
                let s = stream_seed(seed, Stream::Batches, &[round as u64, id as u64]);
                let w = local_train(&self.global, client, &self.training, s)?;
                let l = loss(&w, &client.train)?;
                Ok((id, w, l))
            })
            .collect::<Result<_>>()?;

        let total: usize = sel.winners.iter().map(|&id| self.clients[id].train.len()).sum();
        let train_loss = trained.iter().map(|(_, _, l)| l).sum::<f64>() / trained.len() as f64;
        let locals: Vec<(ModelParams, f64)> = trained
            .into_iter()
            .map(|(id, w, _)| (w, self.clients[id].train.len() as f64 / total as f64))
            .collect();
        self.global = aggregate(&locals)?;

        for &id in &sel.winners {
            let drain = compute_drain(self.clients[id].size, &self.energy_params);
            self.energy.apply_drain(id, drain.total, round)?;
        }

        let auction = self.config.experiment.strategy == Strategy::ClusterAuction;
        let claims: Vec<WinnerClaim> = sel
            .winners
            .iter()
            .map(|&id| WinnerClaim { client_id: id, samples: self.clients[id].size, price: sel.price_of(id).unwrap_or(0.0) })
            .collect();
        let model = if auction { self.config.selection.reward_model } else { RewardModel::ProportionalData };
        let settlement = settle_rewards(&claims, model, self.ledger.total_income, self.ledger.planned_rounds)?;
        self.ledger.record(&settlement);
        for &id in &sel.winners {
            self.participations[id] += 1;
        }

        let (accuracy, test_loss) = evaluate(&self.global, &self.test)?;
        self.record_trace(&sel, &settlement);
        self.energy_rows.extend(energy_snapshot(round, &self.energy));
        Ok(RoundRecord {
            round,
            strategy: self.config.experiment.strategy,
            checksum: self.global.checksum(),
            winners: sel.winners.clone(),
            accuracy,
            test_loss,
            train_loss,
            energy_std: energy_balance(&self.energy)?,
            mean_bid: sel.mean_bid(),
            server_reward: settlement.server,
            clients_reward_sum: settlement.clients_total(),
            s_min: sel.s_min,
            backfilled: sel.backfilled.clone(),
        })
    }

    fn record_trace(&mut self, sel: &RoundSelection, settlement: &Settlement) {
        let paid = |id: usize| settlement.payouts.iter().find(|(c, _)| *c == id).map(|(_, p)| *p);
        if sel.auction.is_empty() {
            for &id in &sel.winners {
                let cluster = self.clustering.as_ref().and_then(|c| c.cluster_of(id));
                self.auction.push(TraceRow::winner(sel.round, cluster, id, paid(id).unwrap_or(0.0)));
            }
        } else {
            for r in &sel.auction {
                self.auction.push(TraceRow::from_auction(sel.round, r, paid(r.client_id)));
            }
        }
    }

    /// Runs all configured rounds, stopping early if clients run out.
    pub fn run(mut self) -> Result<ExperimentOutcome> {
        let mut records = Vec::with_capacity(self.config.experiment.rounds);
        let mut halted = None;
        for round in 1..=self.config.experiment.rounds {
            match self.run_round(round) {
                Ok(r) => records.push(r),
                Err(Error::Selection(msg)) => {
                    halted = Some(format!("round {round}: {msg}"));
                    break;
                }
                Err(e) => return Err(Error::Round { round, source: Box::new(e) }),
            }
        }
        Ok(ExperimentOutcome {
            records,
            auction: self.auction,
            energy: self.energy_rows,
            final_params: self.global,
            clustering: self.clustering,
            ledger: self.ledger,
            halted,
        })
    }
}

fn energy_snapshot(round: usize, state: &EnergyState) -> Vec<EnergyRow> {
    state
        .remaining()
        .iter()
        .enumerate()
        .map(|(client_id, &remaining)| EnergyRow { round, client_id, remaining })
        .collect()
}

/// Loads data, builds the federation, and runs it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let (pool, test) = load_data(config)?;
    Federation::new(config, &pool, test)?.run()
}
