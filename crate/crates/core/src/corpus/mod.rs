//! Item-list datasets: loading, filtering, splitting and synthetic generation.

mod filter;
mod io;
mod split;
mod synth;
mod vocab;

pub use filter::{filter_and_truncate, FilterParams};
pub use io::{
    load_raw_lists, read_category_map, read_item_index, read_split, write_category_map,
    write_item_index, write_raw_lists, write_split, RawList, SplitManifest,
};
pub use split::{split_dataset, split_list, DatasetSplits};
pub use synth::{generate_synthetic, SynthConfig, SyntheticCorpus};
pub use vocab::{index_lists, ItemIndex, Vocabulary};

use crate::ItemId;

/// An input list `x` and the target list `y` that continues it.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ListPair {
    pub id: String,
    pub input: Vec<ItemId>,
    pub target: Vec<ItemId>,
}

impl ListPair {
    pub fn new(input: Vec<ItemId>, target: Vec<ItemId>) -> Self {
        ListPair {
            id: String::new(),
            input,
            target,
        }
    }

    /// Checks the pair against a vocabulary: both sides nonempty, every id known.
    pub fn validate(&self, vocab: &Vocabulary) -> crate::Result<()> {
        if self.input.is_empty() || self.target.is_empty() {
            return Err(crate::Error::invalid(format!(
                "pair `{}` has an empty side",
                self.id
            )));
        }
        let m = vocab.num_items() as ItemId;
        if let Some(bad) = self.input.iter().chain(&self.target).find(|&&i| i >= m) {
            return Err(crate::Error::invalid(format!(
                "pair `{}` references item {bad} outside the vocabulary of {m}",
                self.id
            )));
        }
        Ok(())
    }
}
