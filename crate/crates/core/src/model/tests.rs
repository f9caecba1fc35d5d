use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::corpus::ListPair;
use crate::masker::{build_token_bundle, MaskPolicy};

fn config(mode: ClassifierMode, dim: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        dim,
        layers,
        heads,
        max_len: 16,
        classifier: mode,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn bundles(vocab: &Vocabulary, count: usize, seed: u64, lengths: (usize, usize)) -> Vec<TokenBundle> {
    let mut rng = crate::seeded_rng(seed);
    let m = vocab.num_items() as u32;
    (0..count)
        .map(|_| {
            let x = (0..lengths.0).map(|_| rng.random_range(0..m)).collect();
            let y = (0..lengths.1).map(|_| rng.random_range(0..m)).collect();
            let policy = MaskPolicy {
                rho_r: 0.4,
                rho_t: rng.random_range(0.3..=1.0),
                ..MaskPolicy::default()
            };
            build_token_bundle(&ListPair::new(x, y), vocab, &policy, 16, &mut rng).unwrap()
        })
        .collect()
}

/// Scales every weight so the check exercises nonlinear regimes.
fn roughen(model: &mut Model, factor: f64, seed: u64) {
    let mut rng = crate::seeded_rng(seed);
    for (name, t) in model.params.tensors_mut() {
        if name.ends_with(".gamma") {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        } else {
            t.mapv_inplace(|v| v * factor + rng.random_range(-0.05..0.05));
        }
    }
    model.params.zero_pad_rows();
}

#[test]
fn masked_position_embeds_mask_plus_position_and_segment() {
    let vocab = Vocabulary::balanced(6, 2).unwrap();
    let model = Model::new(config(ClassifierMode::TwoStage, 4, 1, 1), vocab.clone(), 1).unwrap();
    let b = crate::masker::query_bundle(&[0, 1], 1, &vocab, 16).unwrap();
    let e = model.embed(&b).unwrap();
    let p = &model.params;
    let s = model.token_space();
    let i = 4; // the MASK slot
    let expected = &p.item_embedding.row(s.mask() as usize)
        + &p.position_embedding.row(i)
        + p.segment_embedding.row(1);
    assert_eq!(e.row(i), expected);
}

#[test]
fn zero_tables_embed_to_zero() {
    let vocab = Vocabulary::balanced(6, 2).unwrap();
    let c = config(ClassifierMode::TwoStage, 4, 1, 1);
    let model = Model::from_parts(c, vocab.clone(), ModelParams::zeros(&c, &vocab)).unwrap();
    let b = &bundles(&vocab, 1, 0, (3, 2))[0];
    assert!(model.embed(b).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn out_of_range_tokens_rejected() {
    let vocab = Vocabulary::balanced(6, 2).unwrap();
    let model = Model::new(config(ClassifierMode::TwoStage, 4, 1, 1), vocab.clone(), 1).unwrap();
    let mut b = bundles(&vocab, 1, 0, (3, 2)).remove(0);
    b.items[1] = 99;
    assert!(model.embed(&b).is_err());
}

#[test]
fn empty_stack_is_identity() {
    let vocab = Vocabulary::balanced(6, 2).unwrap();
    let model = Model::new(config(ClassifierMode::TwoStage, 4, 0, 1), vocab.clone(), 1).unwrap();
    let b = &bundles(&vocab, 1, 0, (3, 2))[0];
    let e0 = model.embed(b).unwrap();
    assert_eq!(model.encode(e0.clone()).unwrap(), e0);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let vocab = Vocabulary::balanced(10, 2).unwrap();
    let mut model = Model::new(config(ClassifierMode::TwoStage, 8, 2, 2), vocab.clone(), 3).unwrap();
    roughen(&mut model, 10.0, 4);
    let b = &bundles(&vocab, 1, 5, (4, 3))[0];
    let e0 = model.embed(b).unwrap();
    let mut swapped = e0.clone();
    swapped.row_mut(2).assign(&e0.row(5));
    swapped.row_mut(5).assign(&e0.row(2));
    let a = model.encode(e0).unwrap();
    let c = model.encode(swapped).unwrap();
    for j in 0..8 {
        assert!((a[[2, j]] - c[[5, j]]).abs() < 1e-12);
        assert!((a[[5, j]] - c[[2, j]]).abs() < 1e-12);
        assert!((a[[0, j]] - c[[0, j]]).abs() < 1e-12);
    }
}

#[test]
fn attention_weights_are_distributions() {
    let vocab = Vocabulary::balanced(10, 2).unwrap();
    let mut model = Model::new(config(ClassifierMode::TwoStage, 8, 2, 4), vocab.clone(), 3).unwrap();
    roughen(&mut model, 20.0, 4);
    let b = &bundles(&vocab, 1, 5, (4, 3))[0];
    for layer in model.attention_weights(model.embed(b).unwrap()).unwrap() {
        assert_eq!(layer.len(), 4);
        for a in layer {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn zero_flat_head_is_uniform() {
    let vocab = Vocabulary::balanced(7, 1).unwrap();
    let mut model = Model::new(config(ClassifierMode::Vanilla, 4, 1, 1), vocab, 1).unwrap();
    model.params.flat_head.w.fill(0.0);
    let p = model.classify_vanilla(ndarray::arr1(&[0.3, -1.0, 2.0, 0.1]).view()).unwrap();
    assert!(p.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
}

#[test]
fn flat_argmax_ignores_constant_shift() {
    let vocab = Vocabulary::balanced(9, 1).unwrap();
    let mut model = Model::new(config(ClassifierMode::Vanilla, 4, 1, 1), vocab, 1).unwrap();
    roughen(&mut model, 50.0, 2);
    let e = ndarray::arr1(&[0.3, -1.0, 2.0, 0.1]);
    let before = model.classify_vanilla(e.view()).unwrap();
    model.params.flat_head.b.mapv_inplace(|v| v + 3.5);
    let after = model.classify_vanilla(e.view()).unwrap();
    assert_eq!(heads::argmax(before.iter().copied()), heads::argmax(after.iter().copied()));
    assert!((before.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn two_stage_outputs_are_consistent() {
    let vocab = Vocabulary::balanced(12, 3).unwrap();
    let mut model = Model::new(config(ClassifierMode::TwoStage, 8, 1, 2), vocab, 1).unwrap();
    roughen(&mut model, 30.0, 2);
    let mut rng = crate::seeded_rng(3);
    for _ in 0..20 {
        let e = ndarray::Array1::from_shape_simple_fn(8, || rng.random_range(-1.0..1.0));
        let out = model.classify_two_stage(e.view()).unwrap();
        assert!((out.category_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((out.local_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(out.category as usize, heads::argmax(out.category_probs.iter().copied()));
        let pc = out.category_probs[out.category as usize];
        let top = out.local_probs.iter().cloned().fold(0.0, f64::max);
        assert!(pc * top <= pc);
        assert_eq!(out.local_probs.len(), 4);
    }
}

/// Two-stage model with one category whose local head copies the flat head
/// of `vanilla`, all other parameters shared.
fn tied_single_category(vanilla: &Model) -> Model {
    let mut c = *vanilla.config();
    c.classifier = ClassifierMode::TwoStage;
    let mut params = ModelParams::zeros(&c, vanilla.vocab());
    let flat = vanilla.params.clone();
    params.item_embedding = flat.item_embedding;
    params.category_embedding = flat.category_embedding;
    params.position_embedding = flat.position_embedding;
    params.segment_embedding = flat.segment_embedding;
    params.layers = flat.layers;
    params.category_head.w.fill(0.7);
    params.local_heads[0] = flat.flat_head;
    Model::from_parts(c, vanilla.vocab().clone(), params).unwrap()
}

#[test]
fn single_category_matches_flat_head() {
    let vocab = Vocabulary::single_category(11).unwrap();
    let mut vanilla = Model::new(config(ClassifierMode::Vanilla, 8, 1, 2), vocab.clone(), 1).unwrap();
    roughen(&mut vanilla, 20.0, 9);
    let two = tied_single_category(&vanilla);
    let batch = bundles(&vocab, 3, 4, (5, 4));

    let lv = vanilla.forward_batch(&batch, None).unwrap();
    let lt = two.forward_batch(&batch, None).unwrap();
    assert!((lv.loss.total - lt.loss.total).abs() < 1e-9);
    assert_eq!(lt.loss.category, 0.0);
    let gv = lv.backward();
    let gt = lt.backward();
    let mut gt_flat = gt.clone();
    gt_flat.flat_head = gt.local_heads[0].clone();
    for ((name, a), (_, b)) in gv.tensors().iter().zip(gt_flat.tensors()) {
        if name.starts_with("head.category") {
            continue;
        }
        let diff = (*a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-9, "{name}: {diff}");
    }
    assert!(gt.category_head.w.iter().all(|&v| v == 0.0));

    let e = two.hidden(&batch[0]).unwrap();
    let out = two.classify_two_stage(e.row(3)).unwrap();
    assert_eq!(out.category_probs, vec![1.0]);
    let flat = vanilla.classify_vanilla(e.row(3)).unwrap();
    for (a, b) in out.local_probs.iter().zip(&flat) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let vocab = Vocabulary::balanced(12, 3).unwrap();
    for mode in [ClassifierMode::Vanilla, ClassifierMode::TwoStage] {
        let mut model = Model::new(config(mode, 8, 1, 2), vocab.clone(), 7).unwrap();
        roughen(&mut model, 15.0, 8);
        let batch = bundles(&vocab, 2, 11, (3, 2));
        let report = check_gradients(&mut model, &batch, 1e-5, 1e-8).unwrap();
        assert!(report.max_relative_error < 1e-4, "{mode}: {report:?}");
    }
}

#[test]
fn pad_rows_and_idle_heads_get_no_gradient() {
    let vocab = Vocabulary::balanced(12, 3).unwrap();
    let model = Model::new(config(ClassifierMode::TwoStage, 8, 1, 2), vocab.clone(), 7).unwrap();
    // labels only from category 0
    let mut batch = bundles(&vocab, 2, 11, (3, 2));
    for b in &mut batch {
        b.labels.retain(|l| l.category == 0);
    }
    batch.retain(|b| !b.labels.is_empty());
    if batch.is_empty() {
        let pair = ListPair::new(vec![1, 2], vec![0]);
        batch.push(
            build_token_bundle(&pair, &vocab, &MaskPolicy::evaluation(), 16, &mut crate::seeded_rng(0))
                .unwrap(),
        );
    }
    let g = model.forward_batch(&batch, None).unwrap().backward();
    assert!(g.category_embedding.row(3).iter().all(|&v| v == 0.0));
    assert!(g.item_embedding.row(12).iter().all(|&v| v == 0.0));
    for h in &g.local_heads[1..] {
        assert!(h.w.iter().chain(h.b.iter()).all(|&v| v == 0.0));
    }
}

#[test]
fn loss_is_deterministic_with_dropout_seed() {
    let vocab = Vocabulary::balanced(12, 3).unwrap();
    let mut c = config(ClassifierMode::TwoStage, 8, 2, 2);
    c.dropout = 0.1;
    let model = Model::new(c, vocab.clone(), 7).unwrap();
    let batch = bundles(&vocab, 4, 11, (4, 3));
    let run = || {
        let mut r = crate::seeded_rng(5);
        model.forward_batch(&batch, Some(&mut r)).unwrap().loss.total.to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let vocab = Vocabulary::from_assignment(&[2, 0, 1, 1, 0, 2, 2]).unwrap();
    let model = Model::new(config(ClassifierMode::TwoStage, 8, 2, 2), vocab, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&a, &model).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.vocab(), model.vocab());
    assert_eq!(loaded.config(), model.config());
    for ((_, x), (_, y)) in model.params.tensors().iter().zip(loaded.params.tensors()) {
        for (p, q) in x.iter().zip(y.iter()) {
            assert_eq!(*p as f32, *q as f32);
        }
    }
}

#[test]
fn corrupt_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"LNARCKP1\x04\x03\x02\x01garbage").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn counters_track_encoder_and_classifier_work() {
    let vocab = Vocabulary::balanced(12, 3).unwrap();
    let model = Model::new(config(ClassifierMode::TwoStage, 8, 1, 2), vocab.clone(), 7).unwrap();
    let b = crate::masker::query_bundle(&[1, 2, 3], 2, &vocab, 16).unwrap();
    let e = model.hidden(&b).unwrap();
    let rows = e.slice(s![5..7, ..]).to_owned();
    model.category_probs(&rows).unwrap();
    assert_eq!(model.encoder_calls(), 1);
    assert_eq!(model.classifier_macs(), 2 * 8 * 3);
    model.local_probs(e.row(5), 1).unwrap();
    assert_eq!(model.classifier_macs(), 2 * 8 * 3 + 8 * 4);
    model.reset_counters();
    assert_eq!(model.classifier_macs(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn activations_and_gradients_stay_finite(seed in any::<u64>(), two_stage in any::<bool>()) {
        let vocab = Vocabulary::balanced(15, 3).unwrap();
        let mode = if two_stage { ClassifierMode::TwoStage } else { ClassifierMode::Vanilla };
        let model = Model::new(config(mode, 8, 2, 2), vocab.clone(), seed).unwrap();
        let batch = bundles(&vocab, 2, seed, (5, 4));
        let fwd = model.forward_batch(&batch, None).unwrap();
        prop_assert!(fwd.loss.total.is_finite() && fwd.loss.total >= 0.0);
        prop_assert!(fwd.backward().all_finite());
        let e: Array2<f64> = model.hidden(&batch[0]).unwrap();
        prop_assert!(e.iter().all(|v| v.is_finite()));
    }
}
