//! Client costs, equilibrium bids, utilities, and reward settlement.
//!
//! Cost of client `i` in a round is `c = ws*Cs + wr*Cr` where
//!
//! * `Cr = phi^(E_res - E_cp)` while the battery outlasts the computation,
//!   otherwise the client is ineligible;
//! * `Cs = chi * vartheta^(Ns/scale) + zeta * (1 - log_a(co + a))`, clamped to `[0,1]`.
//!
//! Bids follow `b = 1/(N-K+1) + (N-K)/(N-K+1) * c` within the client's cluster.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub phi: f64,
    pub chi: f64,
    pub zeta: f64,
    pub vartheta: f64,
    pub log_base: f64,
    pub weight_service: f64,
    pub weight_resource: f64,
    /// Divides `Ns` in the service-cost exponent.
    pub sample_scale: f64,
    /// Flip the participation term so that frequent winners pay more.
    pub penalize_participation: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            phi: 0.5,
            chi: 0.7,
            zeta: 0.3,
            vartheta: 0.5,
            log_base: 2.0,
            weight_service: 0.3,
            weight_resource: 0.7,
            sample_scale: 600.0,
            penalize_participation: false,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(domain(format!("{name} = {v} must lie in (0,1)")))
            }
        };
        open_unit("phi", self.phi)?;
        open_unit("vartheta", self.vartheta)?;
        open_unit("chi", self.chi)?;
        open_unit("zeta", self.zeta)?;
        open_unit("weight_service", self.weight_service)?;
        open_unit("weight_resource", self.weight_resource)?;
        if (self.chi + self.zeta - 1.0).abs() > 1e-9 {
            return Err(domain(format!("chi + zeta = {} must equal 1", self.chi + self.zeta)));
        }
        if (self.weight_service + self.weight_resource - 1.0).abs() > 1e-9 {
            return Err(domain(format!(
                "weight_service + weight_resource = {} must equal 1",
                self.weight_service + self.weight_resource
            )));
        }
        if !(self.log_base > 1.0 && self.log_base.is_finite()) {
            return Err(domain(format!("log_base = {} must be > 1", self.log_base)));
        }
        if !(self.sample_scale > 0.0 && self.sample_scale.is_finite()) {
            return Err(domain(format!("sample_scale = {} must be > 0", self.sample_scale)));
        }
        Ok(())
    }
}

/// A cost that is either a number or "cannot serve this round".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostValue {
    Finite(f64),
    Ineligible,
}

impl CostValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            CostValue::Finite(v) => Some(v),
            CostValue::Ineligible => None,
        }
    }

    pub fn is_eligible(self) -> bool {
        matches!(self, CostValue::Finite(_))
    }
}

pub fn resource_cost(remaining: f64, computation: f64, phi: f64) -> CostValue {
    let margin = remaining - computation;
    if margin > 0.0 {
        CostValue::Finite(phi.powf(margin))
    } else {
        CostValue::Ineligible
    }
}

pub fn service_cost(samples: usize, participations: u32, params: &CostParams) -> f64 {
    let a = params.log_base;
    let size_term = params.chi * params.vartheta.powf(samples as f64 / params.sample_scale);
    let history = 1.0 - (f64::from(participations) + a).ln() / a.ln();
    let history = if params.penalize_participation { -history } else { history };
    (size_term + params.zeta * history).clamp(0.0, 1.0)
}

pub fn total_cost(service: f64, resource: CostValue, params: &CostParams) -> CostValue {
    match resource {
        CostValue::Ineligible => CostValue::Ineligible,
        CostValue::Finite(cr) => {
            CostValue::Finite((params.weight_service * service + params.weight_resource * cr).clamp(0.0, 1.0))
        }
    }
}

/// Symmetric equilibrium bid for a cluster of `n` bidders with `k` winners.
pub fn optimal_bid(cost: f64, n: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(domain(format!("need 1 <= K_j ({k}) <= N_j ({n})")));
    }
    if !(0.0..=1.0).contains(&cost) {
        return Err(domain(format!("cost {cost} outside [0,1]")));
    }
    let losers = (n - k) as f64;
    Ok(1.0 / (losers + 1.0) + losers / (losers + 1.0) * cost)
}

pub fn utility(price: f64, cost: f64, won: bool) -> f64 {
    if won {
        price - cost
    } else {
        0.0
    }
}

/// How a round's share of model income `Rg/Nr` is split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardModel {
    /// Winners split it by local data size; the server keeps nothing.
    ProportionalData,
    /// Each winner gets its bid times an equal per-winner pot; the server keeps the rest.
    #[default]
    BidShare,
    /// Each winner gets its bid times the whole round income; the server gets
    /// whatever is left, which can be negative with several winners.
    BidShareLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinnerClaim {
    pub client_id: usize,
    pub samples: usize,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settlement {
    /// `(client_id, payout)` in the order of the claims.
    pub payouts: Vec<(usize, f64)>,
    pub server: f64,
}

impl Settlement {
    pub fn clients_total(&self) -> f64 {
        self.payouts.iter().map(|(_, p)| p).sum()
    }
}

pub fn settle_rewards(winners: &[WinnerClaim], model: RewardModel, total_income: f64, planned_rounds: usize) -> Result<Settlement> {
    if winners.is_empty() {
        return Err(domain("no winners to pay"));
    }
    if !(total_income > 0.0) || planned_rounds == 0 {
        return Err(domain("Rg and Nr must be positive"));
    }
    let per_round = total_income / planned_rounds as f64;
    Ok(match model {
        RewardModel::ProportionalData => {
            let total: usize = winners.iter().map(|w| w.samples).sum();
            if total == 0 {
                return Err(domain("winners hold no samples"));
            }
            let payouts = winners
                .iter()
                .map(|w| (w.client_id, w.samples as f64 / total as f64 * per_round))
                .collect();
            Settlement { payouts, server: 0.0 }
        }
        RewardModel::BidShare => {
            let pot = per_round / winners.len() as f64;
            let payouts = winners.iter().map(|w| (w.client_id, w.price * pot)).collect();
            let server = winners.iter().map(|w| (1.0 - w.price) * pot).sum();
            Settlement { payouts, server }
        }
        RewardModel::BidShareLiteral => {
            let payouts: Vec<_> = winners.iter().map(|w| (w.client_id, w.price * per_round)).collect();
            let paid: f64 = payouts.iter().map(|(_, p)| p).sum();
            Settlement { payouts, server: per_round - paid }
        }
    })
}

/// Running totals of payments.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardLedger {
    pub client_totals: Vec<f64>,
    pub server_per_round: Vec<f64>,
    pub total_income: f64,
    pub planned_rounds: usize,
}

impl RewardLedger {
    pub fn new(n_clients: usize, total_income: f64, planned_rounds: usize) -> Self {
        Self {
            client_totals: vec![0.0; n_clients],
            server_per_round: Vec::new(),
            total_income,
            planned_rounds,
        }
    }

    pub fn record(&mut self, s: &Settlement) {
        for &(id, p) in &s.payouts {
            self.client_totals[id] += p;
        }
        self.server_per_round.push(s.server);
    }
}

/// How the best-response check estimates a bid's win probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WinEstimator {
    /// Fraction of simulated auctions the bid would win.
    Direct,
    /// Empirical distribution of one rival's bid, combined with the
    /// binomial count of rivals bidding below. Resolves win
    /// probabilities far below `1/trials`.
    PlugIn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub bid: f64,
    pub expected_utility: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponseReport {
    pub cost: f64,
    pub n: usize,
    pub k: usize,
    pub equilibrium_bid: f64,
    pub grid: Vec<GridPoint>,
    pub argmax_bid: f64,
    pub distance: f64,
    /// `K_j == N_j`: every bid wins, so the best bid is the largest one.
    pub degenerate: bool,
}

const GRID_STEP: f64 = 0.0025;
const GRID_HALF_WIDTH: usize = 80;
const BATCHES: usize = 10;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability that fewer than `k` of `rivals` independent bids fall below,
/// given each does so with probability `below`.
fn fewer_than_k_below(rivals: usize, k: usize, below: f64) -> f64 {
    (0..k.min(rivals + 1))
        .map(|j| binomial(rivals, j) * below.powi(j as i32) * (1.0 - below).powi((rivals - j) as i32))
        .sum()
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo expected utility of bids on a grid around the equilibrium
/// bid, against `n - 1` rivals with uniform costs who bid by [`optimal_bid`].
pub fn best_response_check(
    cost: f64,
    n: usize,
    k: usize,
    trials: usize,
    seed: u64,
    estimator: WinEstimator,
) -> Result<BestResponseReport> {
    let b_star = optimal_bid(cost, n, k)?;
    if trials < 1000 {
        return Err(domain(format!("best-response check needs >= 1000 trials, got {trials}")));
    }
    let grid_bids: Vec<f64> = (0..=2 * GRID_HALF_WIDTH)
        .map(|i| b_star + (i as f64 - GRID_HALF_WIDTH as f64) * GRID_STEP)
        .filter(|&b| b >= cost - 1e-12 && b <= 1.0 + 1e-12)
        .collect();

    if k == n {
        let grid: Vec<GridPoint> = grid_bids
            .iter()
            .map(|&bid| GridPoint { bid, expected_utility: bid - cost, std_error: 0.0 })
            .collect();
        let argmax_bid = grid.iter().map(|g| g.bid).fold(f64::NEG_INFINITY, f64::max);
        return Ok(BestResponseReport {
            cost,
            n,
            k,
            equilibrium_bid: b_star,
            grid,
            argmax_bid,
            distance: (argmax_bid - b_star).abs(),
            degenerate: true,
        });
    }

    let rivals = n - 1;
    let mut rng = rng_from(seed);
    let batch_len = trials.div_ceil(BATCHES);
    // per batch, per grid point
    let mut batch_utils = vec![Vec::with_capacity(BATCHES); grid_bids.len()];
    let mut done = 0;
    while done < trials {
        let len = batch_len.min(trials - done);
        done += len;
        match estimator {
            WinEstimator::Direct => {
                // k-th lowest rival bid per simulated auction; a bid wins below it
                let mut thresholds: Vec<f64> = (0..len)
                    .map(|_| {
                        let mut bids: Vec<f64> =
                            (0..rivals).map(|_| optimal_bid(rng.random_range(0.0..1.0), n, k).unwrap()).collect();
                        bids.select_nth_unstable_by(k - 1, f64::total_cmp);
                        bids[k - 1]
                    })
                    .collect();
                thresholds.sort_by(f64::total_cmp);
                for (g, &b) in grid_bids.iter().enumerate() {
                    let wins = len - thresholds.partition_point(|&t| t <= b);
                    batch_utils[g].push((b - cost) * wins as f64 / len as f64);
                }
            }
            WinEstimator::PlugIn => {
                let mut draws: Vec<f64> =
                    (0..len * rivals).map(|_| optimal_bid(rng.random_range(0.0..1.0), n, k).unwrap()).collect();
                draws.sort_by(f64::total_cmp);
                for (g, &b) in grid_bids.iter().enumerate() {
                    let below = draws.partition_point(|&d| d < b) as f64 / draws.len() as f64;
                    batch_utils[g].push((b - cost) * fewer_than_k_below(rivals, k, below));
                }
            }
        }
    }

    let grid: Vec<GridPoint> = grid_bids
        .iter()
        .zip(&batch_utils)
        .map(|(&bid, u)| {
            let (expected_utility, std_error) = mean_and_se(u);
            GridPoint { bid, expected_utility, std_error }
        })
        .collect();
    let best = grid
        .iter()
        .fold(None::<&GridPoint>, |acc, g| match acc {
            Some(a) if a.expected_utility >= g.expected_utility => Some(a),
            _ => Some(g),
        })
        .unwrap();
    Ok(BestResponseReport {
        cost,
        n,
        k,
        equilibrium_bid: b_star,
        argmax_bid: best.bid,
        distance: (best.bid - b_star).abs(),
        grid,
        degenerate: false,
    })
}

impl BestResponseReport {
    pub fn utility_at(&self, bid: f64) -> Option<&GridPoint> {
        self.grid.iter().find(|g| (g.bid - bid).abs() < GRID_STEP / 2.0)
    }

    /// Utility rises to the argmax and falls after it, ignoring dips no
    /// larger than `z` combined standard errors.
    pub fn is_unimodal(&self, z: f64) -> bool {
        let peak = self.grid.iter().position(|g| g.bid == self.argmax_bid).unwrap_or(0);
        let ok = |a: &GridPoint, b: &GridPoint| {
            b.expected_utility >= a.expected_utility - z * (a.std_error + b.std_error) - 1e-15
        };
        self.grid[..=peak].windows(2).all(|w| ok(&w[0], &w[1]))
            && self.grid[peak..].windows(2).all(|w| ok(&w[1], &w[0]))
    }
}
