use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss, loss_and_gradient, ModelParams};
use crate::datasets::{ClientDataset, LabeledDataset};
use crate::error::{domain, Result};
use crate::rng::{derive, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Weight of the `0.5 * mu * |w - w_global|^2` term. Zero is plain local SGD.
    pub prox_coefficient: f64,
    /// Multi-step equivalence factor; only the convergence lab reads it.
    pub theta: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            local_epochs: 5,
            batch_size: 32,
            prox_coefficient: 0.0,
            theta: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(domain(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.local_epochs == 0 {
            return Err(domain("local_epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be >= 1"));
        }
        if !(self.prox_coefficient >= 0.0 && self.prox_coefficient.is_finite()) {
            return Err(domain(format!("prox_coefficient {} must be >= 0", self.prox_coefficient)));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(domain(format!("theta {} outside (0,1]", self.theta)));
        }
        Ok(())
    }
}

/// Seed for epoch `epoch` of a local run started with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive(seed, &[epoch as u64])
}

/// Local objective with the proximal penalty anchored at `anchor`.
pub fn prox_objective(params: &ModelParams, anchor: &ModelParams, batch: &LabeledDataset, mu: f64) -> Result<f64> {
    Ok(loss(params, batch)? + 0.5 * mu * params.squared_distance(anchor))
}

/// One pass over `data` in shuffled mini-batches.
///
/// With a proximal weight the update takes the proximal term implicitly:
/// `w <- (w - lr*g + lr*mu*anchor) / (1 + lr*mu)`, which stays stable for
/// any `lr*mu` and reduces to `w - lr*g` when `mu = 0`.
pub fn train_epoch(
    params: &mut ModelParams,
    anchor: &ModelParams,
    data: &LabeledDataset,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<()> {
    if data.is_empty() {
        return Err(domain("empty training split"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from(seed));
    let lr = cfg.learning_rate;
    let mu = cfg.prox_coefficient;
    for batch in order.chunks(cfg.batch_size) {
        let (_, grad) = loss_and_gradient(params, data, Some(batch), true)?;
        let grad = grad.unwrap();
        if mu == 0.0 {
            for (w, g) in params.values.iter_mut().zip(&grad.0) {
                *w -= lr * g;
            }
        } else {
            let denom = 1.0 + lr * mu;
            for ((w, g), a) in params.values.iter_mut().zip(&grad.0).zip(&anchor.values) {
                *w = (*w - lr * g + lr * mu * a) / denom;
            }
        }
    }
    Ok(())
}

/// Runs `cfg.local_epochs` epochs on `data`, anchored at the starting params.
pub fn local_train_on(params: &ModelParams, data: &LabeledDataset, cfg: &TrainingConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(domain("empty training split"));
    }
    let mut w = params.clone();
    for epoch in 0..cfg.local_epochs {
        train_epoch(&mut w, params, data, cfg, epoch_seed(seed, epoch))?;
    }
    Ok(w)
}

/// Trains on the client's train split.
pub fn local_train(params: &ModelParams, client: &ClientDataset, cfg: &TrainingConfig, seed: u64) -> Result<ModelParams> {
    local_train_on(params, &client.train, cfg, seed)
}
