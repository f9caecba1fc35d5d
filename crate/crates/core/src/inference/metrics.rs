use std::collections::HashSet;

use crate::ItemId;

/// Relevant items that a duplicate-free list can hit: the distinct targets.
fn relevant(target: &[ItemId]) -> HashSet<ItemId> {
    target.iter().copied().collect()
}

/// NDCG over the first `k` generated items with binary relevance and
/// `log2(rank + 1)` discounting, normalised by the ideal ordering of
/// `min(k, distinct targets)` hits.
pub fn ndcg_at_k(generated: &[ItemId], target: &[ItemId], k: usize) -> f64 {
    let rel = relevant(target);
    let dcg: f64 = generated
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, g)| rel.contains(g))
        .map(|(i, _)| 1.0 / (i as f64 + 2.0).log2())
        .sum();
    let ideal: f64 = (0..k.min(rel.len())).map(|i| 1.0 / (i as f64 + 2.0).log2()).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Hits among the first `k` generated items over `min(k, distinct targets)`.
pub fn hr_at_k(generated: &[ItemId], target: &[ItemId], k: usize) -> f64 {
    let rel = relevant(target);
    let denom = k.min(rel.len());
    if denom == 0 {
        return 0.0;
    }
    let hits = generated.iter().take(k).filter(|g| rel.contains(g)).count();
    hits as f64 / denom as f64
}

/// Mean metrics over a set of generated lists.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub hr_at_5: f64,
    pub hr_at_10: f64,
}

impl MetricReport {
    pub fn from_lists<'a>(pairs: impl IntoIterator<Item = (&'a [ItemId], &'a [ItemId])>) -> Self {
        let mut r = MetricReport::default();
        for (generated, target) in pairs {
            r.count += 1;
            r.ndcg_at_5 += ndcg_at_k(generated, target, 5);
            r.ndcg_at_10 += ndcg_at_k(generated, target, 10);
            r.hr_at_5 += hr_at_k(generated, target, 5);
            r.hr_at_10 += hr_at_k(generated, target, 10);
        }
        if r.count > 0 {
            let n = r.count as f64;
            r.ndcg_at_5 /= n;
            r.ndcg_at_10 /= n;
            r.hr_at_5 /= n;
            r.hr_at_10 /= n;
        }
        r
    }
}
