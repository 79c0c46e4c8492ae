use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops;

pub const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub inertia: f64,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl Partition {
    pub fn cluster_of(&self, record: usize) -> usize {
        self.assignments[record]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn recompute_inertia(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| vecops::dist_sq(p, &self.centroids[a]))
            .sum()
    }

    /// Structural checks against the points the partition was fit on.
    pub fn validate(&self, points: &[Vec<f64>]) -> Result<()> {
        if self.assignments.len() != points.len() || self.centroids.len() != self.k {
            return Err(Error::Precondition(format!(
                "partition covers {} records and {} centroids, expected {} and K={}",
                self.assignments.len(),
                self.centroids.len(),
                points.len(),
                self.k
            )));
        }
        if self.assignments.iter().any(|&a| a >= self.k) {
            return Err(Error::Precondition("cluster id out of range".into()));
        }
        if self.sizes().contains(&0) {
            return Err(Error::Precondition("empty cluster in partition".into()));
        }
        Ok(())
    }
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = vecops::dist_sq(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| vecops::dist_sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        let mut r = rng.random::<f64>() * total;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && r < d {
                pick = i;
                break;
            }
            r -= d;
        }
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(vecops::dist_sq(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// One Lloyd run; returns `(assignments, centroids, inertia)`.
fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            vecops::axpy(&mut sums[a], 1.0, p);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = vecops::scale(&sums[c], 1.0 / counts[c] as f64);
            }
        }
        // an emptied cluster takes the point farthest from its centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&i, &j| {
                        let di = vecops::dist_sq(&points[i], &centroids[assign[i]]);
                        let dj = vecops::dist_sq(&points[j], &centroids[assign[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    });
                if let Some(i) = far {
                    counts[assign[i]] -= 1;
                    counts[c] = 1;
                    assign[i] = c;
                    centroids[c] = points[i].clone();
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    // final centroids are the means of the final assignment
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(&assign) {
        vecops::axpy(&mut sums[a], 1.0, p);
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = vecops::scale(&sums[c], 1.0 / counts[c] as f64);
        }
    }
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &a)| vecops::dist_sq(p, &centroids[a]))
        .sum();
    (assign, centroids, inertia)
}

/// k-means++ seeded Lloyd with `restarts` independent runs; the lowest
/// inertia wins (earliest on ties). Restart `r` uses stream `r` of `seed`.
pub fn kmeans_partition(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<Partition> {
    if points.is_empty() {
        return Err(Error::Precondition("k-means on an empty set".into()));
    }
    if k == 0 || restarts == 0 {
        return Err(Error::InvalidParameter("K and restarts must be >= 1".into()));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(Error::InvalidParameter(format!(
            "K={k} exceeds the {distinct} distinct points"
        )));
    }
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let run = lloyd(points, plus_plus_seed(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (assignments, centroids, inertia) = best.expect("restarts >= 1");
    Ok(Partition {
        k,
        seed,
        restarts,
        inertia,
        assignments,
        centroids,
    })
}
