//! k-means clustering and the parameter-free routing table built from it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modk::Container;
use crate::tensor::Tensor;

pub const MAX_ITERS: usize = 100;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

impl KMeans {
    pub fn inertia(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.assignment)
            .map(|(p, &a)| dist2(p, &self.centroids[a]))
            .sum()
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`MAX_ITERS`] is reached. A cluster that empties is re-seeded
/// with the point farthest from its current centroid, so every cluster ends
/// with at least one member when the points are distinct.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::Invalid(format!("k-means needs at least k={k} points, got {n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("kmeans", "points differ in width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(c, p)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with centroids.
            centroids.len() % n
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            pick
        };
        centroids.push(points[next].clone());
    }

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centroids[assignment[a]])
                            .total_cmp(&dist2(&points[b], &centroids[assignment[b]]))
                    });
                if let Some(i) = far {
                    counts[assignment[i]] -= 1;
                    counts[j] = 1;
                    assignment[i] = j;
                    centroids[j] = points[i].clone();
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(KMeans {
        centroids,
        assignment,
        iterations,
    })
}

/// Frozen concept-word to expert map.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTable {
    pub centroids: Vec<Vec<f64>>,
    pub words: Vec<String>,
    pub experts: Vec<usize>,
}

impl RoutingTable {
    /// Clusters the neutral features of `words` into `k` groups.
    pub fn fit(words: &[(String, Tensor)], k: usize, seed: u64) -> Result<Self> {
        let points: Vec<Vec<f64>> = words.iter().map(|(_, t)| t.data().to_vec()).collect();
        let km = kmeans(&points, k, seed)?;
        let table = RoutingTable {
            centroids: km.centroids,
            words: words.iter().map(|(w, _)| w.clone()).collect(),
            experts: km.assignment,
        };
        for j in 0..k {
            if !table.experts.contains(&j) {
                return Err(Error::Invalid(format!("expert {j} received no training cluster")));
            }
        }
        Ok(table)
    }

    pub fn n_experts(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid to `neutral`; the path for unseen concept words.
    pub fn route(&self, neutral: &[f64]) -> usize {
        nearest(&self.centroids, neutral)
    }

    /// Fraction of training words owned by each expert.
    pub fn cluster_shares(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n_experts()];
        for &e in &self.experts {
            c[e] += 1.0;
        }
        let n = self.experts.len().max(1) as f64;
        c.iter().map(|v| v / n).collect()
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for c in &self.centroids {
            c.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        for (w, e) in self.words.iter().zip(&self.experts) {
            h.update(w.as_bytes());
            h.update([0]);
            h.update((*e as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn store(&self, c: &mut Container, prefix: &str) {
        let k = self.centroids.len();
        let d = self.centroids.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.centroids.iter().flatten().copied().collect();
        c.put_tensor(format!("{prefix}centroids"), &Tensor::from_parts(vec![k, d], flat));
        c.put_text(format!("{prefix}words"), &self.words.join("\n"));
        let e: Vec<u32> = self.experts.iter().map(|&e| e as u32).collect();
        c.put_u32(format!("{prefix}experts"), &e);
    }

    pub fn load(c: &Container, prefix: &str) -> Result<Self> {
        let cent = c.tensor(&format!("{prefix}centroids"))?;
        let words: Vec<String> = c
            .text(&format!("{prefix}words"))?
            .split('\n')
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        let experts: Vec<usize> = c.u32s(&format!("{prefix}experts"))?.into_iter().map(|e| e as usize).collect();
        let k = cent.shape().first().copied().unwrap_or(0);
        if words.len() != experts.len() || experts.iter().any(|&e| e >= k) {
            return Err(Error::Format("inconsistent routing table".into()));
        }
        Ok(RoutingTable {
            centroids: (0..k).map(|j| cent.row(j).to_vec()).collect(),
            words,
            experts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_index() {
        let c = vec![vec![0.0], vec![2.0], vec![5.0], vec![2.0]];
        assert_eq!(nearest(&c, &[1.0]), 0);
        assert_eq!(nearest(&c, &[2.0]), 1);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = vec![vec![0.0, 1.0], vec![3.0, 1.0], vec![-2.0, 5.0]];
        let km = kmeans(&pts, 3, 1).unwrap();
        assert_eq!(km.inertia(&pts), 0.0);
        assert!(kmeans(&pts, 4, 1).is_err());
    }
}
