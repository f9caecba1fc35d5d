//! Item categories for datasets without metadata: CBOW item embeddings
//! clustered with K-means under Euclidean distance.

mod cbow;
mod io;
mod kmeans;

pub use cbow::{context_positions, train_cbow, CbowConfig, ItemEmbeddingTable};
pub use io::{read_embeddings, write_embeddings};
pub use kmeans::{kmeans, ClusterModel};

use crate::corpus::Vocabulary;
use crate::{Error, Result};

/// Turns a cluster assignment over `num_items` items into a vocabulary.
/// Clusters are relabelled densely, so the resulting category count is the
/// number of nonempty clusters.
pub fn assign_categories(num_items: usize, model: &ClusterModel) -> Result<Vocabulary> {
    if model.assignment.len() != num_items {
        return Err(Error::invalid(format!(
            "cluster model covers {} items, vocabulary has {num_items}",
            model.assignment.len()
        )));
    }
    let raw: Vec<u64> = model.assignment.iter().map(|&c| c as u64).collect();
    let vocab = Vocabulary::from_assignment(&raw)?;
    vocab.check_partition()?;
    Ok(vocab)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let rows = a.iter().max().map_or(0, |&m| m as usize + 1);
    let cols = b.iter().max().map_or(0, |&m| m as usize + 1);
    let mut table = vec![0u64; rows * cols];
    for (&x, &y) in a.iter().zip(b) {
        table[x as usize * cols + y as usize] += 1;
    }
    let pairs = |k: u64| (k * k.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&k| pairs(k)).sum();
    let row_sum: f64 = (0..rows)
        .map(|r| pairs(table[r * cols..(r + 1) * cols].iter().sum()))
        .sum();
    let col_sum: f64 = (0..cols)
        .map(|c| pairs((0..rows).map(|r| table[r * cols + c]).sum()))
        .sum();
    let expected = row_sum * col_sum / pairs(n as u64);
    let max = 0.5 * (row_sum + col_sum);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
