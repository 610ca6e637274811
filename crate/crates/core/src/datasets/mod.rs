//! Labeled data: IDX ingestion, synthetic Gaussian classes, and Non-IID
//! imbalanced client partitions.

mod idx;
mod partition;
mod synth;

pub use idx::{parse_idx_images, parse_idx_labels, parse_idx_pair, read_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{partition, ClientDataset, PartitionSpec};
pub use synth::synth_gaussian;

use crate::error::{domain, Error, Result};

/// Row-major feature matrix with one integer class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if features.len() != labels.len() * n_features {
            return Err(Error::Consistency(format!(
                "{} feature values for {} labels of width {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(domain(format!("label {bad} outside [0, {n_classes})")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(domain("non-finite feature value"));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn empty(n_features: usize, n_classes: usize) -> Self {
        Self {
            features: Vec::new(),
            n_features,
            labels: Vec::new(),
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the rows at `indices` (repeats allowed) into a new dataset.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            n_features: self.n_features,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// Row indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn normalize_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(domain("label histogram of an empty dataset"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Class frequencies of one dataset.
pub fn dataset_histogram(data: &LabeledDataset) -> Result<Vec<f64>> {
    normalize_counts(&data.class_counts())
}

/// Class frequencies over every sample (all three splits) of the given clients.
pub fn label_histogram<'a, I>(clients: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a ClientDataset>,
{
    let mut counts: Vec<usize> = Vec::new();
    for client in clients {
        for split in [&client.train, &client.validation, &client.test] {
            let c = split.class_counts();
            if counts.len() < c.len() {
                counts.resize(c.len(), 0);
            }
            for (acc, v) in counts.iter_mut().zip(c) {
                *acc += v;
            }
        }
    }
    normalize_counts(&counts)
}

/// Total variation distance `0.5 * sum |p_i - q_i|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(domain(format!(
            "histograms of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
