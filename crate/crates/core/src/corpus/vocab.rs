use std::collections::{BTreeSet, HashMap};

use super::RawList;
use crate::{CategoryId, Error, ItemId, Result};

/// Items `0..M`, categories `0..N`, and the partition of items into
/// categories. Every category is nonempty and its member list is sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    item_to_category: Vec<CategoryId>,
    category_members: Vec<Vec<ItemId>>,
    /// Position of each item inside its category's member list.
    local_index: Vec<u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from one raw category label per item. Labels are
    /// relabelled densely in ascending order; unused labels disappear.
    pub fn from_assignment(assignment: &[u64]) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::invalid("vocabulary needs at least one item"));
        }
        let labels: BTreeSet<u64> = assignment.iter().copied().collect();
        let dense: HashMap<u64, CategoryId> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i as CategoryId))
            .collect();
        let item_to_category: Vec<CategoryId> = assignment.iter().map(|l| dense[l]).collect();
        Ok(Self::from_dense(item_to_category, labels.len()))
    }

    fn from_dense(item_to_category: Vec<CategoryId>, num_categories: usize) -> Self {
        let mut category_members = vec![Vec::new(); num_categories];
        let mut local_index = vec![0; item_to_category.len()];
        for (item, &c) in item_to_category.iter().enumerate() {
            let members = &mut category_members[c as usize];
            local_index[item] = members.len() as u32;
            members.push(item as ItemId);
        }
        Vocabulary {
            item_to_category,
            category_members,
            local_index,
        }
    }

    /// `M` items in `N` contiguous blocks whose sizes differ by at most one.
    pub fn balanced(num_items: usize, num_categories: usize) -> Result<Self> {
        if num_categories == 0 || num_categories > num_items {
            return Err(Error::invalid(format!(
                "balanced vocabulary needs 1 <= N <= M, got M={num_items}, N={num_categories}"
            )));
        }
        let (base, extra) = (num_items / num_categories, num_items % num_categories);
        let mut assignment = Vec::with_capacity(num_items);
        for c in 0..num_categories {
            let len = base + usize::from(c < extra);
            assignment.extend(std::iter::repeat_n(c as CategoryId, len));
        }
        Ok(Self::from_dense(assignment, num_categories))
    }

    pub fn single_category(num_items: usize) -> Result<Self> {
        Self::balanced(num_items, 1)
    }

    pub fn num_items(&self) -> usize {
        self.item_to_category.len()
    }

    pub fn num_categories(&self) -> usize {
        self.category_members.len()
    }

    pub fn category_of(&self, item: ItemId) -> CategoryId {
        self.item_to_category[item as usize]
    }

    pub fn item_to_category(&self) -> &[CategoryId] {
        &self.item_to_category
    }

    pub fn members(&self, category: CategoryId) -> &[ItemId] {
        &self.category_members[category as usize]
    }

    pub fn local_index(&self, item: ItemId) -> usize {
        self.local_index[item as usize] as usize
    }

    pub fn category_sizes(&self) -> Vec<usize> {
        self.category_members.iter().map(Vec::len).collect()
    }

    /// Checks the partition invariants; always true for values built by the
    /// constructors, kept for callers that deserialize vocabularies.
    pub fn check_partition(&self) -> Result<()> {
        let total: usize = self.category_sizes().iter().sum();
        if total != self.num_items() {
            return Err(Error::invalid(format!(
                "category sizes sum to {total}, expected {}",
                self.num_items()
            )));
        }
        for (c, members) in self.category_members.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid(format!("category {c} is empty")));
            }
            for (k, &item) in members.iter().enumerate() {
                if self.category_of(item) as usize != c || self.local_index(item) != k {
                    return Err(Error::invalid(format!("item {item} misfiled in category {c}")));
                }
            }
        }
        Ok(())
    }
}

/// Dense ids assigned in first-appearance order, with the external ids kept
/// for output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemIndex {
    external: Vec<u64>,
    lookup: HashMap<u64, ItemId>,
}

impl ItemIndex {
    pub fn from_external(external: Vec<u64>) -> Self {
        let lookup = external
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i as ItemId))
            .collect();
        ItemIndex { external, lookup }
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn dense(&self, external: u64) -> Option<ItemId> {
        self.lookup.get(&external).copied()
    }

    pub fn external(&self, dense: ItemId) -> u64 {
        self.external[dense as usize]
    }

    pub fn external_ids(&self) -> &[u64] {
        &self.external
    }
}

pub fn index_lists(lists: &[RawList]) -> (Vec<Vec<ItemId>>, ItemIndex) {
    let mut index = ItemIndex::default();
    let dense = lists
        .iter()
        .map(|list| {
            list.items
                .iter()
                .map(|&ext| {
                    *index.lookup.entry(ext).or_insert_with(|| {
                        index.external.push(ext);
                        (index.external.len() - 1) as ItemId
                    })
                })
                .collect()
        })
        .collect();
    (dense, index)
}
