//! Lloyd's k-means with k-means++ seeding, deterministic for a fixed seed.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

impl Clustering {
    /// Sum of squared distances to assigned centers.
    pub fn inertia(&self, features: &[Vec<f64>]) -> f64 {
        features
            .iter()
            .zip(&self.assignments)
            .map(|(f, &a)| sq_dist(f, &self.centers[a]))
            .sum()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(f: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(f, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(features: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = features
        .iter()
        .map(|f| sq_dist(f, &features[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // Every remaining point coincides with a center.
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(sq_dist(f, &features[next]));
        }
    }
    chosen.into_iter().map(|i| features[i].clone()).collect()
}

/// Clusters `features` (rows of equal dimension) into `k` groups.
pub fn kmeans(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Clustering> {
    let n = features.len();
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "k-means needs at least one point and one cluster".into(),
        ));
    }
    if k > n {
        return Err(Error::ClusterCountExceedsPoints {
            clusters: k,
            points: n,
        });
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch("feature rows differ in length".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus(features, k, &mut rng);
    let mut assignments = vec![0; n];
    for _ in 0..max_iter.max(1) {
        let mut dists = vec![0.0; n];
        for (i, f) in features.iter().enumerate() {
            let (c, d) = nearest(f, &centers);
            assignments[i] = c;
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        // Re-seed empty clusters with the point farthest from its center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("some cluster has two members while another is empty");
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
            }
        }
        let mut next = vec![vec![0.0; dim]; k];
        for (f, &a) in features.iter().zip(&assignments) {
            for (s, v) in next[a].iter_mut().zip(f) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, center) in next.iter_mut().enumerate() {
            for s in center.iter_mut() {
                *s /= counts[c] as f64;
            }
            shift = shift.max(sq_dist(center, &centers[c]).sqrt());
        }
        centers = next;
        if shift < tol {
            break;
        }
    }
    for (i, f) in features.iter().enumerate() {
        assignments[i] = nearest(f, &centers).0;
    }
    Ok(Clustering {
        assignments,
        centers,
    })
}
