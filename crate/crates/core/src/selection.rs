//! Per-round client selection: uniform random, cluster-random, and the
//! per-cluster sealed-bid reverse auction with a sample-size threshold.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::Clustering;
use crate::economics::{optimal_bid, resource_cost, service_cost, total_cost, CostParams, CostValue};
use crate::energy::is_eligible;
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    ClusterRandom,
    ClusterAuction,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::ClusterRandom, Strategy::ClusterAuction];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::ClusterRandom => "cluster_random",
            Strategy::ClusterAuction => "cluster_auction",
        }
    }

    pub fn uses_clusters(self) -> bool {
        self != Strategy::Random
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (expected random, cluster_random or cluster_auction)")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the auction's sample-size threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Smallest dataset among the provisional winners of a random cluster.
    #[default]
    ProvisionalWinners,
    /// Dataset size of one uniformly drawn eligible client.
    RandomClient,
}

/// What the selector needs to know about a client this round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub client_id: usize,
    pub samples: usize,
    pub remaining: f64,
    /// Computation energy one round of training would take.
    pub computation: f64,
    pub participations: u32,
}

impl Candidate {
    pub fn eligible(&self) -> bool {
        is_eligible(self.remaining, self.computation)
    }
}

/// One client's line in the auction trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionRow {
    pub cluster: usize,
    pub client_id: usize,
    pub samples: usize,
    pub service_cost: f64,
    pub resource_cost: CostValue,
    pub cost: CostValue,
    pub bid: Option<f64>,
    pub above_threshold: bool,
    pub won: bool,
    /// Won only through backfill.
    pub backfill: bool,
}

impl AuctionRow {
    pub fn eligible(&self) -> bool {
        self.cost.is_eligible()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundSelection {
    pub round: usize,
    /// Ascending client ids.
    pub winners: Vec<usize>,
    pub s_min: Option<usize>,
    pub threshold_cluster: Option<usize>,
    /// Winners that filled a shortfall outside the normal rule.
    pub backfilled: Vec<usize>,
    /// Empty for the non-auction strategies.
    pub auction: Vec<AuctionRow>,
}

impl RoundSelection {
    pub fn price_of(&self, client_id: usize) -> Option<f64> {
        self.auction.iter().find(|r| r.client_id == client_id).and_then(|r| r.bid)
    }

    /// Mean submitted bid over eligible clients.
    pub fn mean_bid(&self) -> Option<f64> {
        let bids: Vec<f64> = self.auction.iter().filter_map(|r| r.bid).collect();
        (!bids.is_empty()).then(|| bids.iter().sum::<f64>() / bids.len() as f64)
    }
}

fn shortfall(needed: usize, have: usize) -> Error {
    Error::Selection(format!("need {needed} eligible clients, only {have} remain"))
}

/// Uniform draw of `k` clients among the eligible ones.
pub fn select_random(clients: &[Candidate], k: usize, round: usize, seed: u64) -> Result<RoundSelection> {
    let eligible: Vec<usize> = clients.iter().filter(|c| c.eligible()).map(|c| c.client_id).collect();
    if eligible.len() < k {
        return Err(shortfall(k, eligible.len()));
    }
    let mut rng = rng_from(seed);
    let mut winners: Vec<usize> = eligible.choose_multiple(&mut rng, k).copied().collect();
    winners.sort_unstable();
    Ok(RoundSelection { round, winners, ..Default::default() })
}

/// `floor(K/J)` each, with the remainder going one apiece to the first clusters.
pub fn allocate_quota(k: usize, j: usize) -> Result<Vec<usize>> {
    if j == 0 {
        return Err(Error::Domain("need at least one cluster".into()));
    }
    let (base, extra) = (k / j, k % j);
    Ok((0..j).map(|c| base + usize::from(c < extra)).collect())
}

fn by_id(clients: &[Candidate], clustering: &Clustering) -> Result<BTreeMap<usize, Candidate>> {
    let map: BTreeMap<usize, Candidate> = clients.iter().map(|c| (c.client_id, *c)).collect();
    if map.len() != clients.len() {
        return Err(Error::Domain("duplicate client ids among candidates".into()));
    }
    if let Some(c) = map.keys().find(|&&id| clustering.cluster_of(id).is_none()) {
        return Err(Error::Consistency(format!("client {c} has no cluster")));
    }
    Ok(map)
}

/// Fills `winners` up to `k` with uniform draws from eligible clients not yet chosen.
fn backfill_uniform(
    winners: &mut Vec<usize>,
    backfilled: &mut Vec<usize>,
    clients: &BTreeMap<usize, Candidate>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if winners.len() >= k {
        return Ok(());
    }
    let pool: Vec<usize> = clients
        .values()
        .filter(|c| c.eligible() && !winners.contains(&c.client_id))
        .map(|c| c.client_id)
        .collect();
    let missing = k - winners.len();
    if pool.len() < missing {
        return Err(shortfall(k, winners.len() + pool.len()));
    }
    let extra: Vec<usize> = pool.choose_multiple(rng, missing).copied().collect();
    backfilled.extend(&extra);
    winners.extend(extra);
    Ok(())
}

/// `K_j` uniform draws inside each cluster.
pub fn select_cluster_random(
    clustering: &Clustering,
    clients: &[Candidate],
    k: usize,
    round: usize,
    seed: u64,
) -> Result<RoundSelection> {
    let map = by_id(clients, clustering)?;
    let quotas = allocate_quota(k, clustering.k())?;
    let mut rng = rng_from(seed);
    let mut winners = Vec::with_capacity(k);
    for (j, &quota) in quotas.iter().enumerate() {
        let pool: Vec<usize> =
            clustering.members(j).into_iter().filter(|id| map.get(id).is_some_and(Candidate::eligible)).collect();
        winners.extend(pool.choose_multiple(&mut rng, quota.min(pool.len())).copied());
    }
    let mut backfilled = Vec::new();
    backfill_uniform(&mut winners, &mut backfilled, &map, k, &mut rng)?;
    winners.sort_unstable();
    backfilled.sort_unstable();
    Ok(RoundSelection { round, winners, backfilled, ..Default::default() })
}

/// Auction order: bid, then service cost, then resource cost, then id.
fn auction_order(a: &AuctionRow, b: &AuctionRow) -> Ordering {
    let key = |r: &AuctionRow| (r.bid.unwrap_or(f64::INFINITY), r.service_cost, r.cost_cr());
    let (ka, kb) = (key(a), key(b));
    ka.0.total_cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then(ka.2.total_cmp(&kb.2))
        .then(a.client_id.cmp(&b.client_id))
}

impl AuctionRow {
    fn cost_cr(&self) -> f64 {
        self.resource_cost.finite().unwrap_or(f64::INFINITY)
    }
}

/// Costs and bids of every client, grouped by cluster in ascending id.
pub fn compute_bids(
    clustering: &Clustering,
    clients: &[Candidate],
    quotas: &[usize],
    econ: &CostParams,
) -> Result<Vec<AuctionRow>> {
    let map = by_id(clients, clustering)?;
    let mut rows = Vec::with_capacity(clients.len());
    for (j, &quota) in quotas.iter().enumerate() {
        let members = clustering.members(j);
        let base: Vec<AuctionRow> = members
            .iter()
            .filter_map(|id| map.get(id))
            .map(|c| {
                let cs = service_cost(c.samples, c.participations, econ);
                let cr = resource_cost(c.remaining, c.computation, econ.phi);
                AuctionRow {
                    cluster: j,
                    client_id: c.client_id,
                    samples: c.samples,
                    service_cost: cs,
                    resource_cost: cr,
                    cost: total_cost(cs, cr, econ),
                    bid: None,
                    above_threshold: false,
                    won: false,
                    backfill: false,
                }
            })
            .collect();
        let n_j = base.iter().filter(|r| r.eligible()).count();
        let k_j = quota.clamp(1, n_j.max(1));
        for mut row in base {
            if let CostValue::Finite(c) = row.cost {
                row.bid = Some(optimal_bid(c, n_j, k_j)?);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Per-cluster sealed-bid reverse auction: the `K_j` lowest bids among
/// eligible members with at least `s_min` samples win.
pub fn select_cluster_auction(
    clustering: &Clustering,
    clients: &[Candidate],
    econ: &CostParams,
    rule: ThresholdRule,
    k: usize,
    round: usize,
    seed: u64,
) -> Result<RoundSelection> {
    let map = by_id(clients, clustering)?;
    let quotas = allocate_quota(k, clustering.k())?;
    let mut rows = compute_bids(clustering, clients, &quotas, econ)?;
    let mut rng = rng_from(seed);

    let ranked = |rows: &[AuctionRow], j: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].cluster == j && rows[i].eligible()).collect();
        idx.sort_by(|&a, &b| auction_order(&rows[a], &rows[b]));
        idx
    };

    let (s_min, threshold_cluster) = match rule {
        ThresholdRule::ProvisionalWinners => {
            let open: Vec<usize> =
                (0..quotas.len()).filter(|&j| quotas[j] > 0 && rows.iter().any(|r| r.cluster == j && r.eligible())).collect();
            match open.choose(&mut rng) {
                Some(&js) => {
                    let provisional = ranked(&rows, js);
                    let s = provisional.iter().take(quotas[js]).map(|&i| rows[i].samples).min();
                    (s, Some(js))
                }
                None => (None, None),
            }
        }
        ThresholdRule::RandomClient => {
            let eligible: Vec<usize> = rows.iter().filter(|r| r.eligible()).map(|r| r.samples).collect();
            (eligible.choose(&mut rng).copied(), None)
        }
    };
    let floor = s_min.unwrap_or(0);
    for r in rows.iter_mut() {
        r.above_threshold = r.eligible() && r.samples >= floor;
    }

    let mut winners = Vec::with_capacity(k);
    for (j, &quota) in quotas.iter().enumerate() {
        let order = ranked(&rows, j);
        let (above, below): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| rows[i].above_threshold);
        for i in above.into_iter().chain(below).take(quota) {
            rows[i].won = true;
            rows[i].backfill = !rows[i].above_threshold;
            winners.push(rows[i].client_id);
        }
    }
    let mut backfilled: Vec<usize> = rows.iter().filter(|r| r.backfill).map(|r| r.client_id).collect();
    let before = winners.len();
    backfill_uniform(&mut winners, &mut backfilled, &map, k, &mut rng)?;
    for &id in &winners[before..] {
        let row = rows.iter_mut().find(|r| r.client_id == id).expect("winner has a row");
        row.won = true;
        row.backfill = true;
    }
    winners.sort_unstable();
    backfilled.sort_unstable();
    Ok(RoundSelection { round, winners, s_min, threshold_cluster, backfilled, auction: rows })
}

/// Checks that the non-backfill winners of every cluster are exactly its
/// lowest-cost eligible members above the threshold.
pub fn check_cost_oracle(sel: &RoundSelection) -> Result<()> {
    let clusters: std::collections::BTreeSet<usize> = sel.auction.iter().map(|r| r.cluster).collect();
    for j in clusters {
        let rows: Vec<&AuctionRow> = sel.auction.iter().filter(|r| r.cluster == j).collect();
        let regular: Vec<usize> = rows.iter().filter(|r| r.won && !r.backfill).map(|r| r.client_id).collect();
        let mut qualified: Vec<&&AuctionRow> = rows.iter().filter(|r| r.above_threshold).collect();
        qualified.sort_by(|a, b| {
            let (ca, cb) = (a.cost.finite().unwrap(), b.cost.finite().unwrap());
            ca.total_cmp(&cb)
                .then(a.service_cost.total_cmp(&b.service_cost))
                .then(a.cost_cr().total_cmp(&b.cost_cr()))
                .then(a.client_id.cmp(&b.client_id))
        });
        let mut expected: Vec<usize> = qualified.iter().take(regular.len()).map(|r| r.client_id).collect();
        let mut got = regular.clone();
        expected.sort_unstable();
        got.sort_unstable();
        if expected != got {
            return Err(Error::Consistency(format!(
                "round {} cluster {j}: auction winners {got:?} differ from lowest-cost {expected:?}",
                sel.round
            )));
        }
    }
    Ok(())
}
