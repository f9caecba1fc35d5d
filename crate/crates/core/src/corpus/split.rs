use rand::seq::SliceRandom;

use super::ListPair;
use crate::{Error, ItemId, Result};

/// Splits a list into input and target halves; the input side takes the
/// extra item of an odd-length list.
pub fn split_list(list: &[ItemId]) -> Result<ListPair> {
    if list.len() < 2 {
        return Err(Error::invalid(format!(
            "cannot split a list of length {} into input and target",
            list.len()
        )));
    }
    let cut = list.len().div_ceil(2);
    Ok(ListPair::new(list[..cut].to_vec(), list[cut..].to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<ListPair>,
    pub validation: Vec<ListPair>,
    pub test: Vec<ListPair>,
    pub split_seed: u64,
    pub ratios: [f64; 3],
}

impl DatasetSplits {
    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

/// Seeded shuffle followed by a train/validation/test cut.
pub fn split_dataset(pairs: Vec<ListPair>, ratios: [f64; 3], seed: u64) -> Result<DatasetSplits> {
    if pairs.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 pairs to split, got {}",
            pairs.len()
        )));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::invalid(format!(
            "split ratios must all be positive, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    let n = pairs.len();
    let mut n_train = (n as f64 * ratios[0] / total).round() as usize;
    let mut n_valid = (n as f64 * ratios[1] / total).round() as usize;
    // rounding both up can overshoot by one
    while n_train + n_valid > n {
        if n_valid > 0 {
            n_valid -= 1;
        } else {
            n_train -= 1;
        }
    }

    let mut shuffled = pairs;
    shuffled.shuffle(&mut crate::seeded_rng(seed));
    let test = shuffled.split_off(n_train + n_valid);
    let validation = shuffled.split_off(n_train);
    Ok(DatasetSplits {
        train: shuffled,
        validation,
        test,
        split_seed: seed,
        ratios,
    })
}
