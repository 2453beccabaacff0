//! K-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Result};

pub const MAX_ITERATIONS: usize = 300;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `k` centroids of dimension `d`
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // every point coincides with a centroid
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[pick]));
        }
    }
    centroids
}

/// Lloyd iterations from a k-means++ start until no centroid moves more
/// than [`TOLERANCE`] or [`MAX_ITERATIONS`] is reached. An emptied cluster
/// keeps its previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return arg("k must be at least 1");
    }
    if points.len() < k {
        return arg(format!("{} points cannot form {k} clusters", points.len()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return arg("points differ in dimension");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n == 0 {
                continue;
            }
            let next: Vec<f64> = s.into_iter().map(|x| x / n as f64).collect();
            shift = shift.max(dist2(c, &next).sqrt());
            *c = next;
        }
        if shift < TOLERANCE {
            break;
        }
    }
    let mut inertia = 0.0;
    for (a, p) in assignments.iter_mut().zip(points) {
        let (i, d) = nearest(p, &centroids);
        *a = i;
        inertia += d;
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}

/// Relabels cluster ids in order of first appearance, for comparing
/// partitions up to relabeling.
pub fn canonical_partition(assignments: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashMap::new();
    assignments
        .iter()
        .map(|a| {
            let next = seen.len();
            *seen.entry(*a).or_insert(next)
        })
        .collect()
}
