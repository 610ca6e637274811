use std::io::Write;

use serde::Serialize;

use super::RoundRecord;
use crate::error::{Error, Result};
use crate::selection::{AuctionRow, Strategy};

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub round: usize,
    pub strategy: Strategy,
    pub accuracy: f64,
    pub train_loss: f64,
    pub energy_std: f64,
    pub mean_bid: Option<f64>,
    pub server_reward: f64,
    pub clients_reward_sum: f64,
}

impl From<&RoundRecord> for MetricRow {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            strategy: r.strategy,
            accuracy: r.accuracy,
            train_loss: r.train_loss,
            energy_std: r.energy_std,
            mean_bid: r.mean_bid,
            server_reward: r.server_reward,
            clients_reward_sum: r.clients_reward_sum,
        }
    }
}

/// One client's line in `auction_trace.csv`. Blank costs mean the round
/// was not an auction; a blank `Cr` alone means the client could not serve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub round: usize,
    pub cluster: Option<usize>,
    pub client_id: usize,
    #[serde(rename = "Cs")]
    pub service_cost: Option<f64>,
    #[serde(rename = "Cr")]
    pub resource_cost: Option<f64>,
    pub cost: Option<f64>,
    pub bid: Option<f64>,
    pub eligible: bool,
    pub won: bool,
    pub reward: f64,
}

impl TraceRow {
    pub(super) fn winner(round: usize, cluster: Option<usize>, client_id: usize, reward: f64) -> Self {
        Self {
            round,
            cluster,
            client_id,
            service_cost: None,
            resource_cost: None,
            cost: None,
            bid: None,
            eligible: true,
            won: true,
            reward,
        }
    }

    pub(super) fn from_auction(round: usize, r: &AuctionRow, reward: Option<f64>) -> Self {
        Self {
            round,
            cluster: Some(r.cluster),
            client_id: r.client_id,
            service_cost: Some(r.service_cost),
            resource_cost: r.resource_cost.finite(),
            cost: r.cost.finite(),
            bid: r.bid,
            eligible: r.eligible(),
            won: r.won,
            reward: reward.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub round: usize,
    pub client_id: usize,
    pub remaining: f64,
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    write_rows(out, rows)
}

pub fn write_auction_csv<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    write_rows(out, rows)
}

pub fn write_energy_csv<W: Write>(out: W, rows: &[EnergyRow]) -> Result<()> {
    write_rows(out, rows)
}
