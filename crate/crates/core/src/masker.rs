//! Hybrid item masking: BERT-style random masking on the input list and
//! suffix masking on the target list, packed into one token bundle
//! `[CLS] x [SEP] y [SEP]`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ListPair, Vocabulary};
use crate::{CategoryId, Error, ItemId, Result};

/// Ids of the special tokens. Item specials follow the `M` real items and
/// the category PAD follows the `N` real categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub num_items: usize,
    pub num_categories: usize,
}

impl TokenSpace {
    pub fn new(vocab: &Vocabulary) -> Self {
        TokenSpace {
            num_items: vocab.num_items(),
            num_categories: vocab.num_categories(),
        }
    }

    pub fn item_pad(&self) -> ItemId {
        self.num_items as ItemId
    }

    pub fn mask(&self) -> ItemId {
        self.num_items as ItemId + 1
    }

    pub fn cls(&self) -> ItemId {
        self.num_items as ItemId + 2
    }

    pub fn sep(&self) -> ItemId {
        self.num_items as ItemId + 3
    }

    pub fn category_pad(&self) -> CategoryId {
        self.num_categories as CategoryId
    }

    /// Rows of the item embedding table: `M` items plus PAD, MASK, CLS, SEP.
    pub fn item_rows(&self) -> usize {
        self.num_items + 4
    }

    /// Rows of the category embedding table: `N` categories plus PAD.
    pub fn category_rows(&self) -> usize {
        self.num_categories + 1
    }

    pub fn is_special(&self, item: ItemId) -> bool {
        item as usize >= self.num_items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    /// Fraction of input positions selected for masking.
    pub rho_r: f64,
    pub beta_m: f64,
    pub beta_r: f64,
    pub beta_u: f64,
    /// Fraction of the target list masked from the end.
    pub rho_t: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            rho_r: 0.15,
            beta_m: 0.8,
            beta_r: 0.1,
            beta_u: 0.1,
            rho_t: 1.0,
        }
    }
}

impl MaskPolicy {
    /// Full-difficulty policy with no input-side masking, used for
    /// validation and inference.
    pub fn evaluation() -> Self {
        MaskPolicy {
            rho_r: 0.0,
            rho_t: 1.0,
            ..MaskPolicy::default()
        }
    }

    pub fn with_rho_t(self, rho_t: f64) -> Self {
        MaskPolicy { rho_t, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.rho_r) {
            return Err(Error::invalid(format!("rho_r = {} outside [0, 1]", self.rho_r)));
        }
        if !(self.rho_t > 0.0 && self.rho_t <= 1.0) {
            return Err(Error::invalid(format!("rho_t = {} outside (0, 1]", self.rho_t)));
        }
        let betas = [self.beta_m, self.beta_r, self.beta_u];
        if !betas.iter().all(|&b| unit(b)) {
            return Err(Error::invalid("mask/replace/keep probabilities must lie in [0, 1]"));
        }
        if (betas.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mask/replace/keep probabilities must sum to 1"));
        }
        Ok(())
    }
}

/// What happened to a selected input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskOp {
    Mask,
    Replace,
    Keep,
}

/// A prediction target: the true item and category at a bundle position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub item: ItemId,
    pub category: CategoryId,
    pub position: usize,
}

/// One side of a bundle after masking. Label positions are relative to the
/// side; `ops[i]` is the operation behind `labels[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSide {
    pub items: Vec<ItemId>,
    pub categories: Vec<CategoryId>,
    pub labels: Vec<Label>,
    pub ops: Vec<MaskOp>,
}

fn unmasked(list: &[ItemId], vocab: &Vocabulary) -> MaskedSide {
    MaskedSide {
        items: list.to_vec(),
        categories: list.iter().map(|&i| vocab.category_of(i)).collect(),
        labels: Vec::new(),
        ops: Vec::new(),
    }
}

/// Selects `round(rho_r * |x|)` positions (ties to even) uniformly without
/// replacement. Each becomes MASK, a uniform random item, or stays, with
/// probabilities `beta_m`, `beta_r`, `beta_u`. Every selected position is
/// labelled and gets category PAD.
pub fn mask_input(
    x: &[ItemId],
    vocab: &Vocabulary,
    policy: &MaskPolicy,
    rng: &mut impl Rng,
) -> MaskedSide {
    let space = TokenSpace::new(vocab);
    let mut side = unmasked(x, vocab);
    let count = ((policy.rho_r * x.len() as f64).round_ties_even() as usize).min(x.len());
    let mut chosen = sample(rng, x.len(), count).into_vec();
    chosen.sort_unstable();
    for pos in chosen {
        let draw: f64 = rng.random();
        let op = if draw < policy.beta_m {
            side.items[pos] = space.mask();
            MaskOp::Mask
        } else if draw < policy.beta_m + policy.beta_r {
            side.items[pos] = rng.random_range(0..space.num_items as ItemId);
            MaskOp::Replace
        } else {
            MaskOp::Keep
        };
        side.categories[pos] = space.category_pad();
        side.labels.push(Label {
            item: x[pos],
            category: vocab.category_of(x[pos]),
            position: pos,
        });
        side.ops.push(op);
    }
    side
}

/// Number of target positions hidden at difficulty `rho_t`. The small
/// slack keeps products such as `0.6 * 5` from rounding up past 3.
pub fn target_mask_count(len: usize, rho_t: f64) -> usize {
    let raw = (rho_t * len as f64 - 1e-9).ceil().max(1.0) as usize;
    raw.min(len)
}

/// Masks the last `max(1, ceil(rho_t * |y|))` positions. Deterministic.
pub fn mask_target(y: &[ItemId], vocab: &Vocabulary, rho_t: f64) -> MaskedSide {
    let space = TokenSpace::new(vocab);
    let mut side = unmasked(y, vocab);
    let k = target_mask_count(y.len(), rho_t);
    for pos in y.len() - k..y.len() {
        side.items[pos] = space.mask();
        side.categories[pos] = space.category_pad();
        side.labels.push(Label {
            item: y[pos],
            category: vocab.category_of(y[pos]),
            position: pos,
        });
        side.ops.push(MaskOp::Mask);
    }
    side
}

/// Model input for one sample. All four token sequences have equal length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBundle {
    pub items: Vec<ItemId>,
    pub categories: Vec<CategoryId>,
    pub positions: Vec<u32>,
    pub segments: Vec<u8>,
    pub labels: Vec<Label>,
}

impl TokenBundle {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Packs `[CLS] x [SEP] y [SEP]` and shifts side-relative labels to
    /// bundle positions.
    pub fn assemble(input: MaskedSide, target: MaskedSide, space: &TokenSpace) -> Self {
        let (nx, ny) = (input.items.len(), target.items.len());
        let len = nx + ny + 3;
        let mut items = Vec::with_capacity(len);
        let mut categories = Vec::with_capacity(len);
        items.push(space.cls());
        items.extend(&input.items);
        items.push(space.sep());
        items.extend(&target.items);
        items.push(space.sep());
        categories.push(space.category_pad());
        categories.extend(&input.categories);
        categories.push(space.category_pad());
        categories.extend(&target.categories);
        categories.push(space.category_pad());
        let segments = (0..len).map(|i| u8::from(i > nx + 1)).collect();
        let shift = |l: &Label, by: usize| Label {
            position: l.position + by,
            ..*l
        };
        let labels = input
            .labels
            .iter()
            .map(|l| shift(l, 1))
            .chain(target.labels.iter().map(|l| shift(l, nx + 2)))
            .collect();
        TokenBundle {
            items,
            categories,
            positions: (0..len as u32).collect(),
            segments,
            labels,
        }
    }

    /// Positions `[start, start + K)` of the target slots, for a bundle built
    /// from an input of length `input_len`.
    pub fn target_range(input_len: usize, k: usize) -> std::ops::Range<usize> {
        input_len + 2..input_len + 2 + k
    }
}

/// Builds a training bundle: random masking on `x`, suffix masking on `y`.
pub fn build_token_bundle(
    pair: &ListPair,
    vocab: &Vocabulary,
    policy: &MaskPolicy,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<TokenBundle> {
    let len = pair.input.len() + pair.target.len() + 3;
    if len > max_len {
        return Err(Error::invalid(format!(
            "bundle for `{}` has length {len}, above the maximum {max_len}",
            pair.id
        )));
    }
    let input = mask_input(&pair.input, vocab, policy, rng);
    let target = mask_target(&pair.target, vocab, policy.rho_t);
    Ok(TokenBundle::assemble(input, target, &TokenSpace::new(vocab)))
}

/// Inference bundle: `x` visible followed by `k` MASK slots.
pub fn query_bundle(
    input: &[ItemId],
    k: usize,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenBundle> {
    prefix_query_bundle(input, &[], k, vocab, max_len)
}

/// Inference bundle whose target side starts with already generated items
/// and ends in `masks` MASK slots.
pub fn prefix_query_bundle(
    input: &[ItemId],
    prefix: &[ItemId],
    masks: usize,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenBundle> {
    if input.is_empty() || masks == 0 {
        return Err(Error::invalid("query needs a nonempty input and at least one slot"));
    }
    let len = input.len() + prefix.len() + masks + 3;
    if len > max_len {
        return Err(Error::invalid(format!(
            "|x| + K + 3 = {len} exceeds the maximum sequence length {max_len}"
        )));
    }
    let space = TokenSpace::new(vocab);
    let mut target = unmasked(prefix, vocab);
    target.items.extend(std::iter::repeat_n(space.mask(), masks));
    target.categories.extend(std::iter::repeat_n(space.category_pad(), masks));
    Ok(TokenBundle::assemble(unmasked(input, vocab), target, &space))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::balanced(20, 4).unwrap()
    }

    #[test]
    fn no_input_masking_is_identity() {
        let v = vocab();
        let policy = MaskPolicy {
            rho_r: 0.0,
            ..MaskPolicy::default()
        };
        let x = vec![1, 5, 7, 9];
        let side = mask_input(&x, &v, &policy, &mut crate::seeded_rng(0));
        assert_eq!(side.items, x);
        assert!(side.labels.is_empty());
    }

    #[test]
    fn input_statistics_match_policy() {
        let v = Vocabulary::balanced(1000, 10).unwrap();
        let policy = MaskPolicy::default();
        let mut rng = crate::seeded_rng(1);
        let (mut tokens, mut selected) = (0usize, 0usize);
        let mut ops = [0usize; 3];
        while tokens < 100_000 {
            let x: Vec<ItemId> = (0..40).map(|_| rng.random_range(0..1000)).collect();
            let side = mask_input(&x, &v, &policy, &mut rng);
            tokens += x.len();
            selected += side.labels.len();
            for op in side.ops {
                ops[op as usize] += 1;
            }
        }
        let frac = selected as f64 / tokens as f64;
        assert!((frac - 0.15).abs() <= 0.01, "{frac}");
        for (count, want) in ops.iter().zip([0.8, 0.1, 0.1]) {
            let share = *count as f64 / selected as f64;
            assert!((share - want).abs() <= 0.02, "{share} vs {want}");
        }
    }

    #[test]
    fn selection_count_rounds_half_to_even() {
        let v = vocab();
        let policy = MaskPolicy {
            rho_r: 0.25,
            ..MaskPolicy::default()
        };
        // 0.25 * 2 = 0.5 rounds to 0, 0.25 * 6 = 1.5 rounds to 2
        let two = mask_input(&[1, 2], &v, &policy, &mut crate::seeded_rng(0));
        let six = mask_input(&[1, 2, 3, 4, 5, 6], &v, &policy, &mut crate::seeded_rng(0));
        assert_eq!(two.labels.len(), 0);
        assert_eq!(six.labels.len(), 2);
    }

    #[test]
    fn target_suffix_rule() {
        let v = vocab();
        let y = vec![3, 4, 5, 6];
        let mask = TokenSpace::new(&v).mask();
        assert_eq!(mask_target(&y, &v, 1.0).items, vec![mask; 4]);
        assert_eq!(mask_target(&y, &v, 0.5).items, vec![3, 4, mask, mask]);
        assert_eq!(mask_target(&y, &v, 0.01).items, vec![3, 4, 5, mask]);
        let side = mask_target(&y, &v, 0.5);
        let pos: Vec<usize> = side.labels.iter().map(|l| l.position).collect();
        assert_eq!(pos, vec![2, 3]);
        assert_eq!(target_mask_count(5, 0.6), 3);
        assert_eq!(target_mask_count(5, 0.61), 4);
    }

    #[test]
    fn bundle_layout() {
        let v = vocab();
        let pair = ListPair::new(vec![1, 2, 3], vec![4, 5]);
        let b = build_token_bundle(&pair, &v, &MaskPolicy::evaluation(), 64, &mut crate::seeded_rng(0))
            .unwrap();
        let s = TokenSpace::new(&v);
        assert_eq!(b.len(), 8);
        assert_eq!(b.segments, vec![0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(b.positions, (0..8).collect::<Vec<u32>>());
        assert_eq!(b.items, vec![s.cls(), 1, 2, 3, s.sep(), s.mask(), s.mask(), s.sep()]);
        let labels: Vec<(ItemId, usize)> = b.labels.iter().map(|l| (l.item, l.position)).collect();
        assert_eq!(labels, vec![(4, 5), (5, 6)]);
        assert!(b.labels.iter().all(|l| l.category == v.category_of(l.item)));
    }

    #[test]
    fn overlong_bundle_rejected() {
        let v = vocab();
        let pair = ListPair::new(vec![1, 2, 3], vec![4, 5]);
        let policy = MaskPolicy::default();
        assert!(build_token_bundle(&pair, &v, &policy, 7, &mut crate::seeded_rng(0)).is_err());
        assert!(query_bundle(&[1, 2, 3], 2, &v, 7).is_err());
    }

    #[test]
    fn query_matches_evaluation_bundle_tokens() {
        let v = vocab();
        let pair = ListPair::new(vec![1, 2, 3], vec![4, 5]);
        let b = build_token_bundle(&pair, &v, &MaskPolicy::evaluation(), 64, &mut crate::seeded_rng(0))
            .unwrap();
        let q = query_bundle(&[1, 2, 3], 2, &v, 64).unwrap();
        assert_eq!((q.items, q.categories, q.segments), (b.items, b.categories, b.segments));
        assert_eq!(TokenBundle::target_range(3, 2), 5..7);
    }

    #[test]
    fn invalid_policies_rejected() {
        let base = MaskPolicy::default();
        assert!(base.validate().is_ok());
        assert!(MaskPolicy { beta_u: 0.2, ..base }.validate().is_err());
        assert!(MaskPolicy { rho_t: 0.0, ..base }.validate().is_err());
        assert!(MaskPolicy { rho_r: 1.5, ..base }.validate().is_err());
    }

    fn pair_strategy() -> impl Strategy<Value = (Vec<ItemId>, Vec<ItemId>)> {
        (
            prop::collection::vec(0u32..20, 1..15),
            prop::collection::vec(0u32..20, 1..15),
        )
    }

    proptest! {
        #[test]
        fn bundle_invariants(
            (x, y) in pair_strategy(),
            rho_r in 0.0f64..=1.0,
            rho_t in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let v = vocab();
            let s = TokenSpace::new(&v);
            let policy = MaskPolicy { rho_r, rho_t, ..MaskPolicy::default() };
            let pair = ListPair::new(x.clone(), y.clone());
            let b = build_token_bundle(&pair, &v, &policy, 64, &mut crate::seeded_rng(seed)).unwrap();
            let len = x.len() + y.len() + 3;
            prop_assert_eq!(b.len(), len);
            prop_assert_eq!(b.categories.len(), len);
            prop_assert_eq!(b.segments.len(), len);
            for w in b.segments.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            let pads = b.categories.iter().filter(|&&c| c == s.category_pad()).count();
            prop_assert_eq!(pads, b.labels.len() + 3);

            // writing labels back recovers the original lists
            let mut restored = b.items.clone();
            for l in &b.labels {
                prop_assert_eq!(b.categories[l.position], s.category_pad());
                restored[l.position] = l.item;
            }
            let mut original = vec![s.cls()];
            original.extend(&x);
            original.push(s.sep());
            original.extend(&y);
            original.push(s.sep());
            prop_assert_eq!(restored, original);

            let again = build_token_bundle(&pair, &v, &policy, 64, &mut crate::seeded_rng(seed)).unwrap();
            prop_assert_eq!(again, b);
        }
    }
}
