//! Video grouping: k-means (k-means++ seeding, Lloyd iterations) over
//! per-video semantic representations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::VideoRecord;
use crate::model::{self, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("kmeans: k = {k} exceeds the number of points ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("kmeans: k must be at least 1")]
    ZeroK,
    #[error("kmeans: points must share one dimension")]
    RaggedPoints,
}

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub wcss_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from k-means++ seeding, run to an assignment fixpoint
/// or 100 iterations. An emptied cluster is re-seeded to the point farthest
/// from its assigned centroid. Deterministic for a given seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let n = points.len();
    if k > n {
        return Err(ClusterError::KTooLarge { k, n });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(ClusterError::RaggedPoints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first centroid uniform, the rest weighted by the
    // squared distance to the nearest chosen centroid.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // all points coincide with a centroid; any point works
            rng.gen_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = sq_dist(p, centroid);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignments = assign(&centroids);
    let mut iterations = 0;
    let mut wcss_history = vec![wcss(points, &assignments, &centroids)];
    for _ in 0..100 {
        iterations += 1;
        // recompute centroids
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its own centroid takes over
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centroids[assignments[i]]);
                        let dj = sq_dist(&points[j], &centroids[assignments[j]]);
                        di.total_cmp(&dj)
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
        let next = assign(&centroids);
        wcss_history.push(wcss(points, &next, &centroids));
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KmeansResult { assignments, centroids, iterations, wcss_history })
}

/// Within-cluster sum of squared distances.
pub fn wcss(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

/// Semantic representation used for grouping: the video representation of
/// a trained model when one is available, otherwise the mean frame feature.
pub fn clustering_representation(record: &VideoRecord, model: Option<&ModelParams>) -> Result<Vec<f64>, ModelError> {
    match model {
        Some(params) => {
            let boundaries = record.boundaries.as_ref().ok_or_else(|| {
                ModelError::Config(format!("video {} must be segmented before model-based clustering", record.id))
            })?;
            let mut tape = Tape::new();
            let ids = params.register(&mut tape);
            let fwd = model::forward_single(&mut tape, &ids, &record.features, boundaries)?;
            Ok(tape.data(fwd.video_rep).to_vec())
        }
        None => {
            let m = record.features.rows() as f64;
            let d = record.features.cols();
            let mut mean = vec![0.0; d];
            for i in 0..record.features.rows() {
                for (j, v) in mean.iter_mut().enumerate() {
                    *v += record.features.get(i, j);
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            Ok(mean)
        }
    }
}
