use rand::seq::SliceRandom;
use rand::Rng;

use super::RawList;
use crate::{CategoryId, Error, ItemId, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_items: usize,
    pub num_categories: usize,
    pub num_lists: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next item follows the current item's category
    /// cycle instead of jumping to a uniformly random item.
    pub pattern_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_items: 2000,
            num_categories: 10,
            num_lists: 5000,
            min_len: 10,
            max_len: 60,
            pattern_strength: 0.9,
            seed: 42,
        }
    }
}

/// Generated lists plus the planted structure that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub lists: Vec<Vec<ItemId>>,
    /// Planted category of every item.
    pub categories: Vec<CategoryId>,
    /// `successor[i]` is the item following `i` on its category's cycle.
    pub successor: Vec<ItemId>,
}

impl SyntheticCorpus {
    pub fn raw_lists(&self) -> Vec<RawList> {
        self.lists
            .iter()
            .enumerate()
            .map(|(i, l)| RawList::new(format!("L{i}"), l.iter().map(|&x| x as u64).collect()))
            .collect()
    }

    pub fn category_entries(&self) -> Vec<(u64, u64)> {
        self.categories
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u64, c as u64))
            .collect()
    }
}

/// Category-structured Markov corpus. Items are shuffled into `N` balanced
/// categories, each category arranges its items on a fixed cycle, and every
/// step either advances along the current item's cycle (with probability
/// `pattern_strength`) or jumps to a uniform random item.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    let SynthConfig {
        num_items: m,
        num_categories: n,
        ..
    } = *config;
    if n == 0 || m < n {
        return Err(Error::invalid(format!("need M >= N >= 1, got M={m}, N={n}")));
    }
    if config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::invalid("synthetic list lengths need 1 <= min_len <= max_len"));
    }
    if !(0.0..=1.0).contains(&config.pattern_strength) {
        return Err(Error::invalid("pattern_strength must lie in [0, 1]"));
    }

    let mut rng = crate::seeded_rng(config.seed);
    let mut order: Vec<ItemId> = (0..m as ItemId).collect();
    order.shuffle(&mut rng);

    let mut categories = vec![0; m];
    let mut successor = vec![0; m];
    let (base, extra) = (m / n, m % n);
    let mut start = 0;
    for c in 0..n {
        let len = base + usize::from(c < extra);
        let cycle = &order[start..start + len];
        for (k, &item) in cycle.iter().enumerate() {
            categories[item as usize] = c as CategoryId;
            successor[item as usize] = cycle[(k + 1) % len];
        }
        start += len;
    }

    let lists = (0..config.num_lists)
        .map(|_| {
            let len = rng.random_range(config.min_len..=config.max_len);
            let mut list = Vec::with_capacity(len);
            let mut current = rng.random_range(0..m as ItemId);
            list.push(current);
            while list.len() < len {
                let follow = rng.random::<f64>() < config.pattern_strength;
                current = if follow {
                    successor[current as usize]
                } else {
                    rng.random_range(0..m as ItemId)
                };
                list.push(current);
            }
            list
        })
        .collect();

    Ok(SyntheticCorpus {
        lists,
        categories,
        successor,
    })
}
