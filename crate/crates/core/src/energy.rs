//! Battery state as a fraction of capacity. Winners pay computation
//! (`Ns * rate / 100`) plus receive and send costs each round they train.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rng::rng_from;

/// Per-round energy costs, all as fractions of battery capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    /// Drain per 100 training samples.
    pub per_100_samples: f64,
    pub recv_cost: f64,
    pub send_cost: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self { per_100_samples: 0.002, recv_cost: 0.001, send_cost: 0.001 }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("per_100_samples", self.per_100_samples),
            ("recv_cost", self.recv_cost),
            ("send_cost", self.send_cost),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(domain(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Initial battery levels. Normal parameters are in percent of capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scenario", deny_unknown_fields)]
pub enum EnergyScenario {
    UniformFull,
    TruncatedNormal { mean: f64, std: f64, lo: f64, hi: f64 },
}

impl EnergyScenario {
    /// Normal(75, 10) restricted to [50, 100].
    pub fn case_two() -> Self {
        EnergyScenario::TruncatedNormal { mean: 75.0, std: 10.0, lo: 50.0, hi: 100.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let EnergyScenario::TruncatedNormal { mean, std, lo, hi } = *self {
            if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
                return Err(domain(format!("energy bounds [{lo}, {hi}] must satisfy 0 <= lo < hi <= 100")));
            }
            if !(lo..=hi).contains(&mean) {
                return Err(domain(format!("energy mean {mean} outside [{lo}, {hi}]")));
            }
            if !(std >= 0.0 && std.is_finite()) {
                return Err(domain(format!("energy std {std} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Energy spent by one client in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drain {
    pub computation: f64,
    pub communication: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrainRecord {
    pub round: usize,
    pub client_id: usize,
    pub amount: f64,
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyState {
    remaining: Vec<f64>,
    history: Vec<DrainRecord>,
}

pub fn init_energy(n_clients: usize, scenario: EnergyScenario, seed: u64) -> Result<EnergyState> {
    scenario.validate()?;
    let remaining = match scenario {
        EnergyScenario::UniformFull => vec![1.0; n_clients],
        EnergyScenario::TruncatedNormal { mean, std, lo, hi } => {
            if std == 0.0 {
                vec![mean / 100.0; n_clients]
            } else {
                let normal = Normal::new(mean, std).map_err(|e| domain(e.to_string()))?;
                let mut rng = rng_from(seed);
                (0..n_clients)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if (lo..=hi).contains(&v) {
                            break v / 100.0;
                        }
                    })
                    .collect()
            }
        }
    };
    Ok(EnergyState { remaining, history: Vec::new() })
}

pub fn compute_drain(samples: usize, params: &EnergyParams) -> Drain {
    let computation = samples as f64 * params.per_100_samples / 100.0;
    let communication = params.recv_cost + params.send_cost;
    Drain { computation, communication, total: computation + communication }
}

/// A client can train only if its battery outlasts the computation.
pub fn is_eligible(remaining: f64, computation: f64) -> bool {
    remaining - computation > 0.0
}

impl EnergyState {
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(domain("energy levels must lie in [0,1]"));
        }
        Ok(Self { remaining: levels, history: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.remaining.len()
    }

    pub fn is_empty(&self) -> bool {
        self.remaining.is_empty()
    }

    pub fn remaining(&self) -> &[f64] {
        &self.remaining
    }

    pub fn level(&self, client_id: usize) -> Option<f64> {
        self.remaining.get(client_id).copied()
    }

    pub fn history(&self) -> &[DrainRecord] {
        &self.history
    }

    pub fn total(&self) -> f64 {
        self.remaining.iter().sum()
    }

    /// Subtracts `amount`, flooring at zero.
    pub fn apply_drain(&mut self, client_id: usize, amount: f64, round: usize) -> Result<()> {
        if !(amount >= 0.0) {
            return Err(domain(format!("drain {amount} must be >= 0")));
        }
        let n = self.remaining.len();
        let level = self
            .remaining
            .get_mut(client_id)
            .ok_or_else(|| domain(format!("unknown client {client_id} (have {n})")))?;
        *level = (*level - amount).max(0.0);
        self.history.push(DrainRecord { round, client_id, amount, remaining: *level });
        Ok(())
    }
}

/// Population standard deviation of remaining energy.
pub fn energy_balance(state: &EnergyState) -> Result<f64> {
    let n = state.remaining.len();
    if n < 2 {
        return Err(domain(format!("energy balance needs >= 2 clients, have {n}")));
    }
    let mean = state.total() / n as f64;
    let var = state.remaining.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(var.sqrt())
}
