//! K-means tokenizer over pooled log-mel frames.
//!
//! Stands in for a pretrained SSL feature extractor: cluster indices become
//! the semantic-token vocabulary for distillation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct KMeansModel {
    pub k: usize,
    pub dim: usize,
    /// K × dim centroid matrix.
    pub centroids: Tensor<f64>,
    /// Σ min-distance² at the final assignment.
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid index (ties go to the lowest index).
fn nearest(centroids: &Tensor<f64>, x: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = dist2(centroids.row(c), x);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with k-means++ initialization. Runs until the
/// assignment reaches a fixpoint or `max_iters`; empty clusters are reseeded
/// to the point farthest from its assigned centroid. Inertia is
/// non-increasing across iterations.
pub fn kmeans_fit(
    features: &Tensor<f64>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansModel> {
    let m = features.rows();
    let dim = features.cols();
    if m < k {
        return Err(Error::InvalidArg(format!("k-means needs at least k={k} points, got {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = Tensor::zeros(&[k, dim]);
    let first = rng.random_range(0..m);
    for (j, &v) in features.row(first).iter().enumerate() {
        centroids.set(0, j, v);
    }
    let mut min_d: Vec<f64> = (0..m)
        .map(|i| dist2(features.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &d) in min_d.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        for (j, &v) in features.row(pick).iter().enumerate() {
            centroids.set(c, j, v);
        }
        for i in 0..m {
            let d = dist2(features.row(i), centroids.row(c));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }

    let mut assign = vec![usize::MAX; m];
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iters.max(1) {
        // assignment step
        let mut changed = false;
        let mut new_inertia = 0.0;
        for i in 0..m {
            let (c, d) = nearest(&centroids, features.row(i));
            new_inertia += d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        debug_assert!(new_inertia <= inertia + 1e-9, "inertia increased");
        inertia = new_inertia;
        if !changed {
            break;
        }
        // update step
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..m {
            let c = assign[i];
            counts[c] += 1;
            for (j, &v) in features.row(i).iter().enumerate() {
                sums[c * dim + j] += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed to the point farthest from its assigned centroid
                let far = (0..m)
                    .max_by(|&a, &b| {
                        let da = dist2(features.row(a), centroids.row(assign[a]));
                        let db = dist2(features.row(b), centroids.row(assign[b]));
                        da.total_cmp(&db)
                    })
                    .unwrap();
                for (j, &v) in features.row(far).iter().enumerate() {
                    centroids.set(c, j, v);
                }
            } else {
                for j in 0..dim {
                    centroids.set(c, j, sums[c * dim + j] / counts[c] as f64);
                }
            }
        }
    }
    // final inertia at the returned centroids
    let inertia = (0..m).map(|i| nearest(&centroids, features.row(i)).1).sum();
    Ok(KMeansModel { k, dim, centroids, inertia })
}

/// Map each feature row to its nearest centroid; tokens are 1-based.
pub fn tokenize(features: &Tensor<f64>, model: &KMeansModel) -> Result<Vec<u16>> {
    if features.cols() != model.dim {
        return Err(Error::Shape(format!(
            "feature dim {} does not match k-means dim {}",
            features.cols(),
            model.dim
        )));
    }
    Ok((0..features.rows())
        .map(|i| (nearest(&model.centroids, features.row(i)).0 + 1) as u16)
        .collect())
}
