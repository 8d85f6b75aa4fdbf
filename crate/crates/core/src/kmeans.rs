//! Lloyd's k-means with k-means++ seeding and restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 50,
            restarts: 3,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    dim: usize,
    centroids: Vec<f64>,
    assignment: Vec<usize>,
    inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its distance².
fn nearest(row: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(row, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl KMeans {
    /// Clusters the rows of `data` (row-major, `dim` columns). Keeps the
    /// restart with the lowest inertia.
    pub fn fit(data: &[f64], dim: usize, config: &KMeansConfig) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::shape(format!("{} values do not form rows of width {dim}", data.len())));
        }
        let n = data.len() / dim;
        if config.k == 0 || n < config.k {
            return Err(Error::InsufficientData(format!("{n} rows for {} clusters", config.k)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut best: Option<KMeans> = None;
        for _ in 0..config.restarts.max(1) {
            let run = Self::lloyd(data, dim, config, &mut rng);
            if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
                best = Some(run);
            }
        }
        Ok(best.expect("at least one restart"))
    }

    fn lloyd(data: &[f64], dim: usize, config: &KMeansConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = data.len() / dim;
        let k = config.k;
        let mut centroids = seed_plus_plus(data, dim, k, rng);
        let mut assignment = vec![usize::MAX; n];
        for _ in 0..config.max_iter {
            let next: Vec<usize> = data.par_chunks(dim).map(|r| nearest(r, &centroids, dim).0).collect();
            let changed = next != assignment;
            assignment = next;
            if !changed {
                break;
            }
            let mut sums = vec![0.0; k * dim];
            let mut counts = vec![0usize; k];
            for (row, &c) in data.chunks(dim).zip(&assignment) {
                counts[c] += 1;
                for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for j in 0..dim {
                        centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                    }
                }
            }
        }
        // Final assignment against the final centroids.
        let (assignment, dists): (Vec<usize>, Vec<f64>) =
            data.par_chunks(dim).map(|r| nearest(r, &centroids, dim)).unzip();
        Self {
            dim,
            centroids,
            assignment,
            inertia: dists.iter().sum(),
        }
    }

    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        nearest(row, &self.centroids, self.dim).0
    }
}

fn seed_plus_plus(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data.chunks(dim).map(|r| sq_dist(r, &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let row = &data[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(row);
        for (d, r) in d2.iter_mut().zip(data.chunks(dim)) {
            *d = d.min(sq_dist(r, row));
        }
    }
    centroids
}
