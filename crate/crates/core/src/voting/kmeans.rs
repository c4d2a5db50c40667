//! Seeded k-means++ initialisation followed by Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::linalg::Mat;
use crate::scalar::{squared_distance, Scalar};

use super::VotingError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
    /// Independent restarts; the lowest final inertia wins, earliest on ties.
    pub n_init: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
            n_init: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub assignments: Vec<usize>,
    pub centroids: Mat<T>,
    pub inertia: T,
    pub iterations: usize,
    /// Inertia after every assignment step, ending with the final value.
    pub inertia_history: Vec<T>,
}

fn plus_plus_init<T: Scalar>(points: &Mat<T>, k: usize, rng: &mut ChaCha8Rng) -> Mat<T> {
    let n = points.rows();
    let mut centroids = Mat::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(first)).to_f64_lossy())
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                chosen = Some(i);
                if acc > target {
                    break;
                }
            }
            chosen.expect("positive total weight has a positive entry")
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = squared_distance(points.row(i), points.row(pick)).to_f64_lossy();
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Nearest centroid per point; ties go to the lowest centroid index.
fn assign<T: Scalar>(points: &Mat<T>, centroids: &Mat<T>) -> Vec<(usize, T)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| {
            let p = points.row(i);
            let mut best = (0, squared_distance(p, centroids.row(0)));
            for c in 1..centroids.rows() {
                let d = squared_distance(p, centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty<T: Scalar>(points: &Mat<T>, centroids: &mut Mat<T>, assigned: &mut [(usize, T)]) {
    let k = centroids.rows();
    let mut counts = vec![0usize; k];
    for &(c, _) in assigned.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for (i, &(c, d)) in assigned.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            if far.is_none_or(|f| d > assigned[f].1) {
                far = Some(i);
            }
        }
        let i = far.expect("n >= k leaves a cluster with two or more points");
        counts[assigned[i].0] -= 1;
        counts[empty] = 1;
        assigned[i] = (empty, T::zero());
        centroids.row_mut(empty).copy_from_slice(points.row(i));
    }
}

fn update_centroids<T: Scalar>(points: &Mat<T>, assigned: &[(usize, T)], k: usize) -> Mat<T> {
    let d = points.cols();
    let mut sums = Mat::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &(c, _)) in assigned.iter().enumerate() {
        counts[c] += 1;
        for (s, &x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        let inv = T::from_usize_lossy(n.max(1));
        for s in sums.row_mut(c) {
            *s /= inv;
        }
    }
    sums
}

/// Restart `r > 0` is seeded from `(seed, r)`; restart 0 uses `seed` itself.
pub fn kmeans<T: Scalar>(
    points: &Mat<T>,
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeansResult<T>, VotingError> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(VotingError::TooFewPoints { n, k });
    }
    if !points.is_finite() {
        return Err(VotingError::NonFinite);
    }
    let mut best = single_run(points, k, seed, params);
    for r in 1..params.n_init {
        let run = single_run(points, k, super::level_seed(seed, r), params);
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

fn single_run<T: Scalar>(points: &Mat<T>, k: usize, seed: u64, params: &KMeansParams) -> KMeansResult<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let tol = T::c(params.tol);
    let mut history = Vec::new();
    let mut assigned = Vec::new();
    let mut iterations = 0;
    while iterations < params.max_iter.max(1) {
        iterations += 1;
        assigned = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut assigned);
        history.push(assigned.iter().map(|a| a.1).sum::<T>());
        let next = update_centroids(points, &assigned, k);
        let shift = (0..k)
            .map(|c| squared_distance(next.row(c), centroids.row(c)).sqrt())
            .fold(T::zero(), T::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    let assignments: Vec<usize> = assigned.iter().map(|a| a.0).collect();
    let inertia: T = assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| squared_distance(points.row(i), centroids.row(c)))
        .sum();
    history.push(inertia);
    KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
        inertia_history: history,
    }
}
