//! Lloyd's k-means with k-means++ seeding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::Matrix;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == c).collect()
    }

    /// The `r` members of cluster `c` closest to its centroid, nearest first;
    /// equal distances keep index order.
    pub fn nearest_members(&self, points: &Matrix, c: usize, r: usize) -> Vec<usize> {
        let mut m: Vec<(f64, usize)> = self
            .members(c)
            .into_iter()
            .map(|i| (sq_dist(points.row(i), self.centroids.row(c)), i))
            .collect();
        m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        m.into_iter().take(r).map(|(_, i)| i).collect()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &Matrix, k: usize, rng: &mut rng::Rng) -> Matrix {
    use rand::Rng as _;
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..k {
        // all remaining points coincide with chosen centroids: pick the next unused index
        let pick = rng::sample_weighted(rng, &d2).unwrap_or(c % n);
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// Clusters the rows of `points` into `k` groups.
///
/// Stops after `max_iters` rounds or when no centroid moves more than 1e-6.
/// An emptied cluster takes over the point farthest from its own centroid.
pub fn cluster_records(points: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::validation("number of clusters must be positive"));
    }
    if k > n {
        return Err(Error::validation(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = rng::rng_from(seed);
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids);
            assignments[i] = c;
            dist[i] = d;
        }
        repair_empty(points, &mut assignments, &mut dist, &centroids, k);
        history.push(dist.iter().sum());

        let mut next = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            crate::math::axpy(1.0, points.row(i), next.row_mut(assignments[i]));
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            next.row_mut(c).iter_mut().for_each(|v| *v *= inv);
            shift = shift.max(libm::sqrt(sq_dist(next.row(c), centroids.row(c))));
        }
        centroids = next;
        if shift < 1e-6 {
            break;
        }
    }
    // final assignment against the final centroids
    for i in 0..n {
        let (c, d) = nearest(points.row(i), &centroids);
        assignments[i] = c;
        dist[i] = d;
    }
    repair_empty(points, &mut assignments, &mut dist, &centroids, k);
    let inertia: f64 = (0..n).map(|i| sq_dist(points.row(i), centroids.row(assignments[i]))).sum();
    Ok(ClusterAssignment {
        assignments,
        centroids,
        inertia,
        history,
        iterations,
    })
}

/// Best of `restarts` independent runs by final inertia; run 0 uses `seed`
/// itself, so one restart is the same as [`cluster_records`].
pub fn cluster_restarts(
    points: &Matrix,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<ClusterAssignment> {
    let mut best = cluster_records(points, k, seed, max_iters)?;
    for r in 1..restarts {
        let a = cluster_records(points, k, rng::derive_seed(seed, r as u64), max_iters)?;
        if a.inertia < best.inertia {
            best = a;
        }
    }
    Ok(best)
}

fn repair_empty(points: &Matrix, assignments: &mut [usize], dist: &mut [f64], centroids: &Matrix, k: usize) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..assignments.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
        if let Some(i) = far {
            counts[assignments[i]] -= 1;
            assignments[i] = c;
            counts[c] = 1;
            dist[i] = sq_dist(points.row(i), centroids.row(c));
        }
    }
}
