//! k-means++ seeding with Lloyd iterations and best-of-restarts selection.

use rayon::prelude::*;

use super::Partition;
use crate::error::{DnaError, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::rng::{derive_seed, Rng};

pub const MAX_ITERS: usize = 300;
pub const MOVE_TOL: f64 = 1e-6;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub partition: Partition,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(x: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    centroids.row_mut(0).copy_from_slice(x.row(rng.below(n)));
    let mut d2: Vec<f64> = x
        .iter_rows()
        .map(|r| sq_dist(r, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, r) in x.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(x: &Matrix, mut centroids: Matrix) -> KMeansFit {
    let (n, d) = x.shape();
    let k = centroids.rows();
    let mut assign = vec![0usize; n];
    let mut iterations = 0;
    for it in 0..MAX_ITERS {
        iterations = it + 1;
        for (i, r) in x.iter_rows().enumerate() {
            assign[i] = nearest(r, &centroids).0;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, r) in x.iter_rows().enumerate() {
            counts[assign[i]] += 1;
            for (s, &v) in sums.row_mut(assign[i]).iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut moved = 0.0f64;
        for (c, &count) in counts.iter().enumerate() {
            // an empty cluster keeps its previous centroid
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
            moved = moved.max(sq_dist(sums.row(c), centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(sums.row(c));
        }
        if moved <= MOVE_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, r) in x.iter_rows().enumerate() {
        let (c, dist) = nearest(r, &centroids);
        assign[i] = c;
        inertia += dist;
    }
    KMeansFit {
        partition: Partition {
            assignments: assign,
            num_clusters: k,
        },
        centroids,
        inertia,
        iterations,
    }
}

/// Cluster the rows of `x` into `k` groups, keeping the lowest-inertia run of
/// `restarts` seeded restarts (ties go to the lower restart index).
pub fn kmeans(x: &Matrix, k: usize, seed: u64, restarts: usize) -> Result<KMeansFit> {
    if k == 0 {
        return Err(DnaError::Config("k-means needs k >= 1".into()));
    }
    if x.rows() < k {
        return Err(DnaError::Structural(format!(
            "k-means with {} points cannot form {k} clusters",
            x.rows()
        )));
    }
    if !x.is_finite() {
        return Err(DnaError::Numeric(
            "k-means input contains non-finite values".into(),
        ));
    }
    let restarts = restarts.max(1);
    let fits: Vec<KMeansFit> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = Rng::new(derive_seed(seed, r as u64));
            lloyd(x, plus_plus(x, k, &mut rng))
        })
        .collect();
    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.inertia < fits[best].inertia {
            best = i;
        }
    }
    Ok(fits.into_iter().nth(best).expect("at least one restart"))
}
