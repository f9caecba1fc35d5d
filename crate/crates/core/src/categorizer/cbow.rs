use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::{Error, ItemId, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbowConfig {
    pub dim: usize,
    /// Context items taken from each side of the target.
    pub window: usize,
    pub epochs: usize,
    /// Starting learning rate, decayed linearly to near zero.
    pub learning_rate: f32,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            dim: 64,
            window: 2,
            epochs: 20,
            learning_rate: 0.025,
            negatives: 5,
            seed: 0,
        }
    }
}

/// `M` rows of `dim` floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingTable {
    pub num_items: usize,
    pub dim: usize,
    pub vectors: Vec<f32>,
}

impl ItemEmbeddingTable {
    pub fn row(&self, item: usize) -> &[f32] {
        &self.vectors[item * self.dim..(item + 1) * self.dim]
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.row(a), self.row(b));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum();
        let nx: f64 = x.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|q| (*q as f64).powi(2)).sum::<f64>().sqrt();
        dot / (nx * ny)
    }
}

/// Positions within `window` of `target` on either side, clipped at the
/// list boundaries.
pub fn context_positions(len: usize, target: usize, window: usize) -> Vec<usize> {
    let lo = target.saturating_sub(window);
    let hi = (target + window).min(len - 1);
    (lo..=hi).filter(|&p| p != target).collect()
}

fn sigmoid(x: f32) -> f32 {
    if x > 30.0 {
        1.0
    } else if x < -30.0 {
        0.0
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// Continuous bag-of-words with negative sampling: each item is predicted
/// from the mean of its surrounding items' input vectors. Negatives are drawn
/// from the unigram distribution raised to 0.75. Single-threaded and
/// bit-reproducible for a fixed seed. Each returned row is the sum of an
/// item's context and output vectors.
pub fn train_cbow(
    lists: &[Vec<ItemId>],
    num_items: usize,
    config: &CbowConfig,
) -> Result<ItemEmbeddingTable> {
    if lists.is_empty() {
        return Err(Error::invalid("CBOW needs at least one list"));
    }
    if config.dim == 0 || config.window == 0 {
        return Err(Error::invalid("CBOW needs dim >= 1 and window >= 1"));
    }
    let dim = config.dim;
    let usable: Vec<&Vec<ItemId>> = lists.iter().filter(|l| l.len() >= 2).collect();

    let mut counts = vec![0f64; num_items];
    for list in &usable {
        for &item in list.iter() {
            let slot = counts.get_mut(item as usize).ok_or_else(|| {
                Error::invalid(format!("item {item} outside vocabulary of {num_items}"))
            })?;
            *slot += 1.0;
        }
    }

    let mut rng = crate::seeded_rng(config.seed);
    let mut input: Vec<f32> = (0..num_items * dim)
        .map(|_| (rng.random::<f32>() - 0.5) / dim as f32)
        .collect();
    let mut output = vec![0f32; num_items * dim];

    let total_tokens: usize = usable.iter().map(|l| l.len()).sum();
    if total_tokens == 0 {
        return Ok(ItemEmbeddingTable {
            num_items,
            dim,
            vectors: input,
        });
    }
    let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75)))
        .map_err(|e| Error::invalid(format!("negative sampling table: {e}")))?;

    let budget = (config.epochs * total_tokens) as f32;
    let mut processed = 0usize;
    let mut hidden = vec![0f32; dim];
    let mut grad = vec![0f32; dim];

    for _ in 0..config.epochs {
        for list in &usable {
            for t in 0..list.len() {
                let lr = config.learning_rate * (1.0 - processed as f32 / budget).max(1e-4);
                processed += 1;

                let context = context_positions(list.len(), t, config.window);
                hidden.fill(0.0);
                for &p in &context {
                    let row = &input[list[p] as usize * dim..][..dim];
                    hidden.iter_mut().zip(row).for_each(|(h, x)| *h += x);
                }
                let scale = 1.0 / context.len() as f32;
                hidden.iter_mut().for_each(|h| *h *= scale);
                grad.fill(0.0);

                let target = list[t] as usize;
                for k in 0..=config.negatives {
                    let (sample, label) = if k == 0 {
                        (target, 1.0)
                    } else {
                        let s = noise.sample(&mut rng);
                        if s == target {
                            continue;
                        }
                        (s, 0.0)
                    };
                    let row = &mut output[sample * dim..][..dim];
                    let score: f32 = hidden.iter().zip(row.iter()).map(|(h, o)| h * o).sum();
                    let g = (label - sigmoid(score)) * lr;
                    for j in 0..dim {
                        grad[j] += g * row[j];
                        row[j] += g * hidden[j];
                    }
                }
                for &p in &context {
                    let row = &mut input[list[p] as usize * dim..][..dim];
                    row.iter_mut().zip(&grad).for_each(|(x, g)| *x += g);
                }
            }
        }
    }

    // Context vectors alone separate items that predict each other; adding
    // the output vectors places mutual neighbours together.
    let vectors = input.iter().zip(&output).map(|(i, o)| i + o).collect();
    Ok(ItemEmbeddingTable {
        num_items,
        dim,
        vectors,
    })
}
