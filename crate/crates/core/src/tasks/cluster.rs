use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingMatrix, TaskError};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    /// `k` rows of `d` values.
    pub centroids: Vec<Vec<f64>>,
    /// Clusters that ended with no members; their centroid is the last one
    /// they had.
    pub empty_clusters: Vec<usize>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid; ties go to the lower index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means on L2-normalized rows with k-means++ seeding and Lloyd
/// iterations until the assignment stops changing or `max_iters` is hit.
pub fn kmeans_cluster(
    corpus: &EmbeddingMatrix,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterAssignment, TaskError> {
    let n = corpus.n();
    if k == 0 {
        return Err(TaskError::Invalid("k must be at least 1".into()));
    }
    if n < k {
        return Err(TaskError::TooFewRows { need: k, got: n });
    }
    let norm = corpus.normalized()?;
    let points: Vec<Vec<f64>> = (0..n).map(|i| norm.row_f64(i)).collect();
    let d = corpus.d();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(&points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut empty = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut objective = 0.0;
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (c, dist) = nearest(p, &centroids);
                objective += dist;
                c
            })
            .collect();
        history.push(objective);
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        empty.clear();
        for c in 0..k {
            if counts[c] == 0 {
                empty.push(c);
                continue;
            }
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    Ok(ClusterAssignment { assignments, centroids, empty_clusters: empty, objective_history: history, iterations })
}

/// Projects mean-centred rows onto the two leading principal axes. Each
/// axis is signed so its largest-magnitude coefficient is positive.
pub fn project_2d(corpus: &EmbeddingMatrix) -> Result<Vec<[f64; 2]>, TaskError> {
    let (n, d) = (corpus.n(), corpus.d());
    if n < 2 {
        return Err(TaskError::TooFewRows { need: 2, got: n });
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| corpus.row_f64(i)).collect();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    if !(top > 1e-12 * (1.0 + cov_scale(&centred))) {
        return Err(TaskError::RankZero);
    }
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = centred.row(i);
            let mut out = [0.0; 2];
            for (slot, axis) in out.iter_mut().zip(&axes) {
                *slot = row.iter().zip(axis).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect())
}

fn cov_scale(centred: &DMatrix<f64>) -> f64 {
    centred.iter().map(|v| v.abs()).fold(0.0, f64::max)
}
