use rand::Rng;

use super::ItemEmbeddingTable;
use crate::{Error, Result};

/// Result of Lloyd's algorithm. `inertia_history[i]` is the inertia after
/// the `i`-th assignment step; the last entry equals `inertia`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub dim: usize,
    /// `N` rows of `dim` values, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<u32>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - y;
            d * d
        })
        .sum()
}

/// Nearest centroid per point (ties go to the lower index) and the total
/// squared distance.
fn assign(table: &ItemEmbeddingTable, centroids: &[f64], n: usize) -> (Vec<u32>, Vec<f64>, f64) {
    let dim = table.dim;
    let mut labels = Vec::with_capacity(table.num_items);
    let mut dists = Vec::with_capacity(table.num_items);
    for i in 0..table.num_items {
        let row = table.row(i);
        let (best, dist) = (0..n)
            .map(|c| (c, sq_dist(row, &centroids[c * dim..(c + 1) * dim])))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        labels.push(best as u32);
        dists.push(dist);
    }
    let inertia = dists.iter().sum();
    (labels, dists, inertia)
}

/// k-means++ seeding: the first centre uniformly, each further centre with
/// probability proportional to its squared distance from the chosen ones.
fn seed_centroids(table: &ItemEmbeddingTable, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let m = table.num_items;
    let dim = table.dim;
    let mut chosen = vec![false; m];
    let mut centroids = Vec::with_capacity(n * dim);
    let push = |idx: usize, centroids: &mut Vec<f64>, chosen: &mut Vec<bool>| {
        chosen[idx] = true;
        centroids.extend(table.row(idx).iter().map(|&x| x as f64));
    };

    let first = rng.random_range(0..m);
    push(first, &mut centroids, &mut chosen);
    let mut nearest: Vec<f64> = (0..m)
        .map(|i| sq_dist(table.row(i), &centroids[..dim]))
        .collect();

    for _ in 1..n {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut dart = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    dart -= d;
                    if dart <= 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // every remaining point coincides with a chosen centre
            let free: Vec<usize> = (0..m).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        push(next, &mut centroids, &mut chosen);
        let c = &centroids[centroids.len() - dim..];
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(table.row(i), c));
        }
    }
    centroids
}

/// Lloyd's iterations from k-means++ seeding. Stops when the assignment no
/// longer changes or after `max_iter` updates. An empty cluster is re-seeded
/// at the point farthest from its own centroid.
pub fn kmeans(
    table: &ItemEmbeddingTable,
    n: usize,
    max_iter: usize,
    seed: u64,
) -> Result<ClusterModel> {
    let m = table.num_items;
    if n == 0 || n > m {
        return Err(Error::invalid(format!(
            "cannot form {n} clusters from {m} items"
        )));
    }
    let dim = table.dim;
    let mut rng = crate::seeded_rng(seed);
    let mut centroids = seed_centroids(table, n, &mut rng);
    let (mut labels, mut dists, inertia) = assign(table, &centroids, n);
    let mut history = vec![inertia];

    for _ in 0..max_iter {
        let mut sums = vec![0f64; n * dim];
        let mut sizes = vec![0usize; n];
        for (i, &c) in labels.iter().enumerate() {
            let c = c as usize;
            sizes[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(table.row(i)) {
                *s += *x as f64;
            }
        }
        for c in 0..n {
            if sizes[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / sizes[c] as f64;
                }
            }
        }
        let empty: Vec<usize> = (0..n).filter(|&c| sizes[c] == 0).collect();
        for c in empty {
            let owner_dist: Vec<f64> = (0..m)
                .map(|i| {
                    let o = labels[i] as usize;
                    sq_dist(table.row(i), &centroids[o * dim..(o + 1) * dim])
                })
                .collect();
            let far = (0..m)
                .filter(|&i| sizes[labels[i] as usize] > 1)
                .max_by(|&a, &b| owner_dist[a].total_cmp(&owner_dist[b]).then(b.cmp(&a)));
            if let Some(far) = far {
                sizes[labels[far] as usize] -= 1;
                sizes[c] = 1;
                for j in 0..dim {
                    centroids[c * dim + j] = table.row(far)[j] as f64;
                }
            }
        }

        let (next, next_dists, inertia) = assign(table, &centroids, n);
        history.push(inertia);
        let stable = next == labels;
        labels = next;
        dists = next_dists;
        if stable {
            break;
        }
    }

    Ok(ClusterModel {
        dim,
        centroids,
        assignment: labels,
        inertia: dists.iter().sum(),
        inertia_history: history,
    })
}
