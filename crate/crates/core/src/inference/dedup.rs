use std::collections::HashSet;

use crate::{Error, ItemId, Result};

/// Per-position candidate lists, best first.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct RankedCandidates {
    pub positions: Vec<Vec<(ItemId, f64)>>,
}

/// Walks the positions in order and takes, at each, the best item not
/// chosen at an earlier position.
pub fn dedup(candidates: &RankedCandidates, k: usize) -> Result<Vec<ItemId>> {
    if candidates.positions.len() < k {
        return Err(Error::invalid(format!(
            "{} candidate positions for K = {k}",
            candidates.positions.len()
        )));
    }
    let mut taken = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    for (position, list) in candidates.positions.iter().take(k).enumerate() {
        let pick = list
            .iter()
            .map(|&(item, _)| item)
            .find(|item| !taken.contains(item))
            .ok_or(Error::CandidatesExhausted {
                position,
                requested: k,
            })?;
        taken.insert(pick);
        out.push(pick);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranked(lists: &[&[ItemId]]) -> RankedCandidates {
        RankedCandidates {
            positions: lists
                .iter()
                .map(|l| l.iter().enumerate().map(|(r, &i)| (i, -(r as f64))).collect())
                .collect(),
        }
    }

    #[test]
    fn shared_ranking_is_taken_in_order() {
        let c = ranked(&[&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]]);
        assert_eq!(dedup(&c, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn later_position_skips_earlier_pick() {
        let c = ranked(&[&[0, 1], &[0, 2]]);
        assert_eq!(dedup(&c, 2).unwrap(), vec![0, 2]);
        let c = ranked(&[&[5, 3, 4], &[5, 8, 1], &[5, 8, 9]]);
        assert_eq!(dedup(&c, 3).unwrap(), vec![5, 8, 9]);
    }

    #[test]
    fn exhaustion_is_an_error() {
        let c = ranked(&[&[0], &[0]]);
        assert!(matches!(
            dedup(&c, 2),
            Err(Error::CandidatesExhausted { position: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn equals_greedy_over_score_matrix(
            scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 10), 5),
        ) {
            // oracle: at each row take the highest score among unused columns
            let mut used = [false; 10];
            let mut oracle = Vec::new();
            for row in &scores {
                let mut best = None;
                for (j, &s) in row.iter().enumerate() {
                    if !used[j] && best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
                let (j, _) = best.unwrap();
                used[j] = true;
                oracle.push(j as ItemId);
            }
            let cands = RankedCandidates {
                positions: scores
                    .iter()
                    .map(|row| {
                        let mut l: Vec<(ItemId, f64)> =
                            row.iter().enumerate().map(|(j, &s)| (j as ItemId, s)).collect();
                        l.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                        l
                    })
                    .collect(),
            };
            prop_assert_eq!(dedup(&cands, 5).unwrap(), oracle);
        }
    }
}
