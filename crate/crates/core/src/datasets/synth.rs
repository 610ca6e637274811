use rand_distr::{Distribution, StandardNormal};

use super::LabeledDataset;
use crate::error::{domain, Result};
use crate::rng::rng_from;

/// Draws `n_per_class` samples per class from a unit-variance isotropic
/// Gaussian centred at `separation * e_c`. Samples are stored class by class.
pub fn synth_gaussian(
    n_classes: usize,
    n_per_class: usize,
    n_features: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes == 0 || n_per_class == 0 || n_features == 0 {
        return Err(domain("synthetic dataset counts must be positive"));
    }
    if n_features < n_classes {
        return Err(domain(format!(
            "{n_features} features cannot hold {n_classes} orthogonal class centres"
        )));
    }
    if !separation.is_finite() {
        return Err(domain("separation must be finite"));
    }
    let mut rng = rng_from(seed);
    let n = n_classes * n_per_class;
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        for _ in 0..n_per_class {
            for j in 0..n_features {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let centre = if j == class { separation } else { 0.0 };
                features.push(centre + noise);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, n_features, labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_example_has_margin() {
        let d = synth_gaussian(2, 10, 2, 10.0, 7).unwrap();
        assert_eq!(d.len(), 20);
        let mut min_gap = f64::INFINITY;
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d.label(i) != d.label(j) {
                    let dist = d
                        .row(i)
                        .iter()
                        .zip(d.row(j))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    min_gap = min_gap.min(dist);
                }
            }
        }
        assert!(min_gap > 1.0, "min inter-class distance {min_gap}");
    }

    #[test]
    fn zero_separation_gives_matching_class_means() {
        let d = synth_gaussian(3, 4000, 3, 0.0, 11).unwrap();
        let mut means = vec![vec![0.0; 3]; 3];
        for i in 0..d.len() {
            for (m, x) in means[d.label(i)].iter_mut().zip(d.row(i)) {
                *m += x / 4000.0;
            }
        }
        for a in &means {
            for b in &means {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn same_seed_is_identical() {
        let a = synth_gaussian(4, 25, 6, 3.0, 99).unwrap();
        let b = synth_gaussian(4, 25, 6, 3.0, 99).unwrap();
        let bits = |d: &LabeledDataset| d.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        assert_ne!(bits(&a), bits(&synth_gaussian(4, 25, 6, 3.0, 100).unwrap()));
    }

    #[test]
    fn rejects_zero_counts() {
        assert!(synth_gaussian(0, 1, 1, 1.0, 0).is_err());
        assert!(synth_gaussian(3, 1, 2, 1.0, 0).is_err());
    }
}
