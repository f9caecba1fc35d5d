use std::collections::HashMap;

use super::RawList;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FilterParams {
    /// Items seen fewer times than this across the corpus are removed.
    pub min_freq: usize,
    /// Lists shorter than this are dropped. Must be at least 2 so every
    /// surviving list can be split into an input and a target.
    pub min_len: usize,
    /// Longer lists keep only their first `max_len` items.
    pub max_len: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            min_freq: 10,
            min_len: 10,
            max_len: 60,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 {
            return Err(Error::invalid("min_len must be at least 2"));
        }
        if self.max_len < self.min_len {
            return Err(Error::invalid("max_len must be >= min_len"));
        }
        Ok(())
    }
}

/// Alternates rare-item removal and length truncation/filtering until the
/// corpus stops changing. Frequencies are recounted on the current corpus at
/// every round.
pub fn filter_and_truncate(lists: &[RawList], params: FilterParams) -> Result<Vec<RawList>> {
    params.validate()?;
    let mut current: Vec<RawList> = lists.to_vec();
    loop {
        let mut freq: HashMap<u64, usize> = HashMap::new();
        for list in &current {
            for &item in &list.items {
                *freq.entry(item).or_default() += 1;
            }
        }

        let mut changed = false;
        let mut next = Vec::with_capacity(current.len());
        for mut list in current {
            let before = list.items.len();
            list.items.retain(|item| freq[item] >= params.min_freq);
            list.items.truncate(params.max_len);
            changed |= list.items.len() != before;
            if list.items.len() >= params.min_len {
                next.push(list);
            } else {
                changed = true;
            }
        }
        current = next;
        if !changed {
            break;
        }
    }
    if current.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lists(raw: &[&[u64]]) -> Vec<RawList> {
        raw.iter()
            .enumerate()
            .map(|(i, items)| RawList::new(format!("L{i}"), items.to_vec()))
            .collect()
    }

    /// Independent oracle: apply rule (a) to a whole snapshot, then rule (b),
    /// and repeat until a full round leaves the snapshot untouched.
    fn brute_force(input: &[Vec<u64>], p: FilterParams) -> Vec<Vec<u64>> {
        let mut snapshot: Vec<Vec<u64>> = input.to_vec();
        loop {
            let mut counts = std::collections::BTreeMap::new();
            snapshot.iter().flatten().for_each(|i| *counts.entry(*i).or_insert(0usize) += 1);
            let after_a: Vec<Vec<u64>> = snapshot
                .iter()
                .map(|l| l.iter().copied().filter(|i| counts[i] >= p.min_freq).collect())
                .collect();
            let after_b: Vec<Vec<u64>> = after_a
                .into_iter()
                .map(|l| l.into_iter().take(p.max_len).collect::<Vec<_>>())
                .filter(|l| l.len() >= p.min_len)
                .collect();
            if after_b == snapshot {
                return snapshot;
            }
            snapshot = after_b;
        }
    }

    #[test]
    fn rare_item_removed_everywhere() {
        // item 99 appears 9 times, item 1 appears 20 times
        let mut raw = Vec::new();
        for i in 0..10u64 {
            let mut l = vec![1, 1];
            if i < 9 {
                l.push(99);
            }
            raw.push(l);
        }
        let input: Vec<RawList> = raw
            .iter()
            .enumerate()
            .map(|(i, l)| RawList::new(format!("L{i}"), l.clone()))
            .collect();
        let params = FilterParams {
            min_freq: 10,
            min_len: 2,
            max_len: 10,
        };
        let out = filter_and_truncate(&input, params).unwrap();
        assert!(out.iter().all(|l| !l.items.contains(&99)));
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn identity_when_everything_qualifies() {
        let input = lists(&[&[1, 2, 3], &[3, 2], &[5, 6, 7, 8]]);
        let params = FilterParams {
            min_freq: 1,
            min_len: 2,
            max_len: 4,
        };
        assert_eq!(filter_and_truncate(&input, params).unwrap(), input);
    }

    #[test]
    fn cascading_removal_reaches_fixpoint() {
        // Item 9 is rare (1 occurrence). Removing it drops list 0 below
        // min_len, which in turn leaves item 5 with only 1 occurrence, which
        // then shortens list 1 below min_len as well.
        let input = lists(&[&[5, 9, 4], &[5, 6, 6], &[4, 4, 6, 6], &[4, 6, 6, 4]]);
        let params = FilterParams {
            min_freq: 2,
            min_len: 3,
            max_len: 10,
        };
        let raw: Vec<Vec<u64>> = input.iter().map(|l| l.items.clone()).collect();
        let expected = brute_force(&raw, params);
        let got: Vec<Vec<u64>> = filter_and_truncate(&input, params)
            .unwrap()
            .into_iter()
            .map(|l| l.items)
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![vec![4, 4, 6, 6], vec![4, 6, 6, 4]]);
    }

    #[test]
    fn everything_removed_is_an_error() {
        let input = lists(&[&[1, 2], &[3, 4]]);
        let params = FilterParams {
            min_freq: 5,
            min_len: 2,
            max_len: 3,
        };
        assert!(matches!(
            filter_and_truncate(&input, params),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn min_len_below_two_rejected() {
        let params = FilterParams {
            min_freq: 1,
            min_len: 1,
            max_len: 3,
        };
        assert!(filter_and_truncate(&lists(&[&[1, 2]]), params).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_idempotent(
            raw in prop::collection::vec(prop::collection::vec(0u64..12, 0..14), 1..25),
            min_freq in 1usize..4,
            min_len in 2usize..5,
            extra in 0usize..6,
        ) {
            let params = FilterParams { min_freq, min_len, max_len: min_len + extra };
            let input: Vec<RawList> = raw.iter().enumerate()
                .map(|(i, l)| RawList::new(format!("L{i}"), l.clone())).collect();
            let expected = brute_force(&raw, params);
            match filter_and_truncate(&input, params) {
                Ok(out) => {
                    let got: Vec<Vec<u64>> = out.iter().map(|l| l.items.clone()).collect();
                    prop_assert_eq!(&got, &expected);
                    prop_assert_eq!(filter_and_truncate(&out, params).unwrap(), out);
                }
                Err(Error::EmptyCorpus) => prop_assert!(expected.is_empty()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
