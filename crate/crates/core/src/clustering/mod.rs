//! Gradient-probe clustering: each client averages `repeats` gradients over
//! window-sized random subsets of its train split at the initial model, and
//! k-means groups clients by those mean gradients.

mod kmeans;

pub use kmeans::{inertia_of, kmeans, KMeans};

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::ClientDataset;
use crate::error::{domain, Error, Result};
use crate::models::{self, GradientVector, ModelParams, ModelShape, TrainingConfig};
use crate::rng::{derive, rng_from};

/// A client's averaged gradient at the broadcast model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub client_id: usize,
    pub mean_gradient: GradientVector,
    pub probe_count: usize,
    pub window_size: usize,
}

/// Which part of the probe gradient k-means sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    Full,
    OutputLayer,
}

/// Client feature used for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFeature {
    /// Mean window gradient (the default).
    #[default]
    Gradient,
    /// Parameter change after one local epoch over the window.
    WeightDelta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub window: usize,
    pub repeats: usize,
    pub mode: ReduceMode,
    pub feature: ProbeFeature,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            window: 50,
            repeats: 10,
            mode: ReduceMode::OutputLayer,
            feature: ProbeFeature::Gradient,
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

/// Client-to-cluster map plus centroids in probe-feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    client_ids: Vec<usize>,
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
}

fn window_indices(rng: &mut impl Rng, len: usize, window: usize) -> Vec<usize> {
    if window <= len {
        index::sample(rng, len, window).into_vec()
    } else {
        (0..window).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Averages `repeats` gradients, each over a `window`-sized draw from the
/// client's train split. Draws are without replacement when the window fits.
pub fn probe_client(
    params: &ModelParams,
    client: &ClientDataset,
    window: usize,
    repeats: usize,
    seed: u64,
) -> Result<GradientProbe> {
    let data = &client.train;
    if data.is_empty() {
        return Err(domain(format!("client {} has no training data to probe", client.id)));
    }
    if window == 0 || repeats == 0 {
        return Err(domain("probe window and repeat count must be >= 1"));
    }
    let mut rng = rng_from(seed);
    let mut sum = vec![0.0; params.len()];
    for _ in 0..repeats {
        let idx = window_indices(&mut rng, data.len(), window);
        let g = models::gradient_on(params, data, &idx)?;
        sum.iter_mut().zip(&g.0).for_each(|(s, v)| *s += v);
    }
    sum.iter_mut().for_each(|s| *s /= repeats as f64);
    Ok(GradientProbe {
        client_id: client.id,
        mean_gradient: GradientVector(sum),
        probe_count: repeats,
        window_size: window,
    })
}

/// Parameter delta after one SGD epoch over a single window draw.
fn probe_weight_delta(
    params: &ModelParams,
    client: &ClientDataset,
    window: usize,
    seed: u64,
) -> Result<GradientProbe> {
    let data = &client.train;
    if data.is_empty() {
        return Err(domain(format!("client {} has no training data to probe", client.id)));
    }
    let mut rng = rng_from(seed);
    let subset = data.select(&window_indices(&mut rng, data.len(), window.max(1)));
    let cfg = TrainingConfig { local_epochs: 1, ..TrainingConfig::default() };
    let trained = models::local_train_on(params, &subset, &cfg, derive(seed, &[1]))?;
    let delta = trained.values().iter().zip(params.values()).map(|(a, b)| a - b).collect();
    Ok(GradientProbe {
        client_id: client.id,
        mean_gradient: GradientVector(delta),
        probe_count: 1,
        window_size: window,
    })
}

/// Projects a probe onto the features k-means uses.
pub fn reduce_probe(probe: &GradientProbe, shape: &ModelShape, mode: ReduceMode) -> Result<Vec<f64>> {
    if probe.mean_gradient.0.len() != shape.param_count() {
        return Err(domain(format!(
            "probe of length {} does not match a shape with {} parameters",
            probe.mean_gradient.0.len(),
            shape.param_count()
        )));
    }
    Ok(match mode {
        ReduceMode::Full => probe.mean_gradient.0.clone(),
        ReduceMode::OutputLayer => probe.mean_gradient.0[shape.output_layer()].to_vec(),
    })
}

/// Probes every client at `params`, reduces, and runs k-means.
///
/// Clients are processed in ascending id order and each probe uses a seed
/// derived from the client id, so the result does not depend on input order.
/// Cluster labels are canonicalized (see [`Clustering::canonical`]).
pub fn cluster_clients(
    params: &ModelParams,
    clients: &[ClientDataset],
    k: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Clustering> {
    let mut order: Vec<&ClientDataset> = clients.iter().collect();
    order.sort_by_key(|c| c.id);
    if order.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(domain("duplicate client ids"));
    }
    let features = order
        .par_iter()
        .map(|c| {
            let s = derive(seed, &[c.id as u64]);
            let probe = match cfg.feature {
                ProbeFeature::Gradient => probe_client(params, c, cfg.window, cfg.repeats, s)?,
                ProbeFeature::WeightDelta => probe_weight_delta(params, c, cfg.window, s)?,
            };
            reduce_probe(&probe, params.shape(), cfg.mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let km = kmeans(&features, k, derive(seed, &[u64::MAX]), cfg.max_iters, cfg.tol)?;
    Ok(Clustering {
        client_ids: order.iter().map(|c| c.id).collect(),
        assignments: km.assignments.clone(),
        inertia: km.inertia(),
        centroids: km.centroids,
    }
    .canonical())
}

impl Clustering {
    pub fn new(client_ids: Vec<usize>, assignments: Vec<usize>, centroids: Vec<Vec<f64>>) -> Result<Self> {
        let k = centroids.len();
        if client_ids.len() != assignments.len() {
            return Err(Error::Consistency("client ids and assignments differ in length".into()));
        }
        if k == 0 || assignments.iter().any(|&a| a >= k) {
            return Err(domain(format!("assignments must lie in [0, {k})")));
        }
        let unique: BTreeSet<_> = client_ids.iter().collect();
        if unique.len() != client_ids.len() {
            return Err(domain("duplicate client ids"));
        }
        Ok(Self { client_ids, assignments, centroids, inertia: f64::NAN })
    }

    /// Builds a clustering from an id-to-cluster table, with empty centroids.
    pub fn from_assignments(pairs: &[(usize, usize)]) -> Result<Self> {
        let k = pairs.iter().map(|&(_, c)| c + 1).max().unwrap_or(0);
        Self::new(
            pairs.iter().map(|&(id, _)| id).collect(),
            pairs.iter().map(|&(_, c)| c).collect(),
            vec![Vec::new(); k],
        )
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn cluster_of(&self, client_id: usize) -> Option<usize> {
        self.client_ids.iter().position(|&c| c == client_id).map(|i| self.assignments[i])
    }

    /// Client ids in cluster `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        let mut m: Vec<usize> = self
            .client_ids
            .iter()
            .zip(&self.assignments)
            .filter(|&(_, &a)| a == j)
            .map(|(&id, _)| id)
            .collect();
        m.sort_unstable();
        m
    }

    /// `(client_id, cluster_id)` pairs in ascending client id.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut p: Vec<_> = self.client_ids.iter().copied().zip(self.assignments.iter().copied()).collect();
        p.sort_unstable();
        p
    }

    /// Relabels clusters by ascending centroid norm, ties broken by the
    /// smallest member id.
    pub fn canonical(&self) -> Clustering {
        let k = self.k();
        let norm = |c: &Vec<f64>| c.iter().map(|v| v * v).sum::<f64>();
        let first_member = |j: usize| self.members(j).first().copied().unwrap_or(usize::MAX);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            norm(&self.centroids[a])
                .total_cmp(&norm(&self.centroids[b]))
                .then(first_member(a).cmp(&first_member(b)))
        });
        let mut relabel = vec![0; k];
        for (new, &old) in order.iter().enumerate() {
            relabel[old] = new;
        }
        Clustering {
            client_ids: self.client_ids.clone(),
            assignments: self.assignments.iter().map(|&a| relabel[a]).collect(),
            centroids: order.iter().map(|&o| self.centroids[o].clone()).collect(),
            inertia: self.inertia,
        }
    }

    /// `client_id,cluster_id` text table, one row per client.
    pub fn to_table(&self) -> String {
        let mut out = String::from("client_id,cluster_id\n");
        for (id, c) in self.pairs() {
            out.push_str(&format!("{id},{c}\n"));
        }
        out
    }
}

/// Parses the table written by [`Clustering::to_table`].
pub fn parse_assignment_table(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("client_id,cluster_id") {
        return Err(Error::Format("missing `client_id,cluster_id` header".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?)));
        let Some((id, c)) = parsed else {
            return Err(Error::Format(format!("line {}: expected `<id>,<cluster>`, got {line:?}", n + 2)));
        };
        if !seen.insert(id) {
            return Err(Error::Format(format!("line {}: client {id} listed twice", n + 2)));
        }
        out.push((id, c));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
