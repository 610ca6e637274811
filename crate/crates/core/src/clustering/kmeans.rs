use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{domain, Result};
use crate::rng::rng_from;

/// Output of [`kmeans`]. Cluster ids are in `[0, k)`; every cluster is non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each refinement step, in order.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    sums
}

/// Sum of squared distances from each point to its cluster mean.
pub fn inertia_of(points: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let centroids = means(points, assignments, k);
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every remaining point coincides with a centre
            Err(_) => (0..n).find(|i| !chosen.contains(i)).unwrap(),
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Moves the point farthest from its centroid (among clusters with more
/// than one member) into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] > 1 {
                let d = sq_dist(p, &centroids[a]);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        assignments[far.0] = empty;
        centroids[empty] = points[far.0].clone();
    }
}

/// Single-point moves that strictly lower inertia, applied until none remain.
fn refine_single_moves(points: &[Vec<f64>], assignments: &mut [usize], k: usize, history: &mut Vec<f64>) {
    const MAX_PASSES: usize = 50;
    for _ in 0..MAX_PASSES {
        let mut moved = false;
        for i in 0..points.len() {
            let mut counts = vec![0usize; k];
            assignments.iter().for_each(|&a| counts[a] += 1);
            let from = assignments[i];
            if counts[from] == 1 {
                continue;
            }
            let centroids = means(points, assignments, k);
            let nf = counts[from] as f64;
            let removal_gain = nf / (nf - 1.0) * sq_dist(&points[i], &centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for to in (0..k).filter(|&j| j != from) {
                let nt = counts[to] as f64;
                let cost = nt / (nt + 1.0) * sq_dist(&points[i], &centroids[to]);
                let delta = cost - removal_gain;
                // relative margin keeps round-off from cycling
                if delta < -1e-12 * removal_gain.max(1e-300) && best.is_none_or(|(_, d)| delta < d) {
                    best = Some((to, delta));
                }
            }
            if let Some((to, _)) = best {
                assignments[i] = to;
                moved = true;
                history.push(inertia_of(points, assignments, k));
            }
        }
        if !moved {
            return;
        }
    }
}

/// k-means++ seeding, Lloyd iterations until the largest centroid shift is
/// below `tol` (or `max_iters`), then single-point improvement moves.
/// Ties in nearest-centroid assignment go to the lowest centroid index.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(domain(format!("cannot form {k} clusters from {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(domain("points have differing dimensions"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(domain("non-finite point coordinate"));
    }

    let mut rng = rng_from(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut history = Vec::new();

    for _ in 0..max_iters.max(1) {
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        repair_empty(points, &mut assignments, &mut centroids);
        let updated = means(points, &assignments, k);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum());
        if shift < tol {
            break;
        }
    }

    refine_single_moves(points, &mut assignments, k, &mut history);
    let centroids = means(points, &assignments, k);
    Ok(KMeans { assignments, centroids, inertia_history: history })
}
