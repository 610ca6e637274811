use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::derive;

const ROUNDING_SLACK: f64 = 1e-9;

/// Recipe for a Non-IID, size-imbalanced split of a pooled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    pub n_clients: usize,
    /// Fraction of each client's samples that carry its dominant label.
    pub dominant_fraction: f64,
    /// Mean client size; sizes are uniform on `[mean*min_factor, mean*max_factor]`.
    pub mean_size: usize,
    pub size_min_factor: f64,
    pub size_max_factor: f64,
    /// train / validation / test.
    pub split_ratios: [f64; 3],
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            n_clients: 100,
            dominant_fraction: 1.0,
            mean_size: 600,
            size_min_factor: 1.0 / 6.0,
            size_max_factor: 2.0,
            split_ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Partition(msg));
        if self.n_clients == 0 {
            return bad("n_clients must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dominant_fraction) {
            return bad(format!("dominant_fraction {} outside [0,1]", self.dominant_fraction));
        }
        if self.mean_size == 0 {
            return bad("mean_size must be positive".into());
        }
        if !(self.size_min_factor > 0.0 && self.size_min_factor < self.size_max_factor)
            || !self.size_max_factor.is_finite()
        {
            return bad(format!(
                "size factors must satisfy 0 < min ({}) < max ({})",
                self.size_min_factor, self.size_max_factor
            ));
        }
        if self.split_ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return bad(format!("split ratios {:?} must each lie in (0,1)", self.split_ratios));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios sum to {sum}, not 1"));
        }
        Ok(())
    }

    /// Inclusive client size bounds.
    pub fn size_bounds(&self) -> (usize, usize) {
        let lo = (self.mean_size as f64 * self.size_min_factor - ROUNDING_SLACK).ceil() as usize;
        let hi = (self.mean_size as f64 * self.size_max_factor + ROUNDING_SLACK).floor() as usize;
        (lo.max(1), hi.max(lo.max(1)))
    }

    /// Number of samples forced to carry the dominant label.
    pub fn dominant_count(&self, size: usize) -> usize {
        ((self.dominant_fraction * size as f64 - ROUNDING_SLACK).ceil().max(0.0) as usize).min(size)
    }

    /// `(train, validation, test)` sizes; train takes the rounding remainder.
    pub fn split_sizes(&self, size: usize) -> (usize, usize, usize) {
        let part = |r: f64| (r * size as f64 + ROUNDING_SLACK).floor() as usize;
        let val = part(self.split_ratios[1]);
        let test = part(self.split_ratios[2]);
        (size - val - test, val, test)
    }
}

/// One simulated client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub dominant_label: usize,
    /// Total local samples across all splits.
    pub size: usize,
}

impl ClientDataset {
    /// Count of samples (all splits) with the given label.
    pub fn label_count(&self, label: usize) -> usize {
        [&self.train, &self.validation, &self.test]
            .iter()
            .map(|d| d.labels().iter().filter(|&&l| l == label).count())
            .sum()
    }
}

/// Splits `data` into `spec.n_clients` clients.
///
/// Client `i` has dominant label `i mod n_classes`. Samples are drawn from
/// the pool independently per client: clients may share samples, but a
/// client only repeats a sample when its request exceeds what the pool holds.
pub fn partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let n_classes = data.n_classes();
    let by_class = data.indices_by_class();
    if n_classes == 0 {
        return Err(Error::Partition("dataset has no classes".into()));
    }
    if let Some(empty) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::Partition(format!("class {empty} has no samples")));
    }
    let (lo, hi) = spec.size_bounds();
    let pool = data.len();

    let mut clients = Vec::with_capacity(spec.n_clients);
    for id in 0..spec.n_clients {
        let mut rng = crate::rng::rng_from(derive(spec.seed, &[id as u64]));
        let size = rng.random_range(lo..=hi);
        let dominant = id % n_classes;
        let n_dominant = spec.dominant_count(size);

        let class_pool = &by_class[dominant];
        let mut chosen: Vec<usize> = if n_dominant <= class_pool.len() {
            index::sample(&mut rng, class_pool.len(), n_dominant)
                .into_iter()
                .map(|k| class_pool[k])
                .collect()
        } else {
            (0..n_dominant)
                .map(|_| class_pool[rng.random_range(0..class_pool.len())])
                .collect()
        };

        let n_rest = size - n_dominant;
        if n_rest > 0 {
            let taken: HashSet<usize> = chosen.iter().copied().collect();
            if n_rest <= pool - taken.len() {
                let free: Vec<usize> = (0..pool).filter(|i| !taken.contains(i)).collect();
                chosen.extend(index::sample(&mut rng, free.len(), n_rest).into_iter().map(|k| free[k]));
            } else {
                chosen.extend((0..n_rest).map(|_| rng.random_range(0..pool)));
            }
        }

        chosen.shuffle(&mut rng);
        let (n_train, n_val, _) = spec.split_sizes(size);
        let (train, rest) = chosen.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        clients.push(ClientDataset {
            id,
            train: data.select(train),
            validation: data.select(val),
            test: data.select(test),
            dominant_label: dominant,
            size,
        });
    }
    Ok(clients)
}
