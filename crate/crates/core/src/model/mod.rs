//! The list continuation network: summed token embeddings, a stack of
//! bidirectional Transformer layers, and either a flat softmax over all
//! items or a two-stage classifier (category, then item within category).
//! Gradients are computed analytically in 64-bit floats.

mod checkpoint;
mod encoder;
mod gradcheck;
mod heads;
mod ops;
mod params;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{check_gradients, GradientReport};
pub use heads::LossBreakdown;
pub use params::{LayerNormParams, LayerParams, Linear, ModelParams};

pub(crate) use ops::top_k;

use crate::corpus::Vocabulary;
use crate::masker::{TokenBundle, TokenSpace};
use crate::{CategoryId, Error, Result, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    Vanilla,
    TwoStage,
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierMode::Vanilla => "vanilla",
            ClassifierMode::TwoStage => "two_stage",
        })
    }
}

impl FromStr for ClassifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ClassifierMode::Vanilla),
            "two_stage" => Ok(ClassifierMode::TwoStage),
            other => Err(Error::invalid(format!("unknown classifier `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Number of Transformer layers `H`.
    pub layers: usize,
    pub heads: usize,
    /// Longest token bundle, `|x| + |y| + 3`.
    pub max_len: usize,
    pub classifier: ClassifierMode,
    /// Keeps the gated local-loss denominator away from zero.
    pub epsilon: f64,
    /// Dropout on the attention and feed-forward outputs during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 3,
            heads: 8,
            max_len: 128,
            classifier: ClassifierMode::TwoStage,
            epsilon: 1e-8,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::invalid("max_len must be at least 3"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Output of the two-stage classifier for one hidden row.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageOutput {
    pub category_probs: Vec<f64>,
    pub category: CategoryId,
    /// Distribution over the members of `category`, in member order.
    pub local_probs: Vec<f64>,
}

/// Parameters together with the vocabulary they were built for. Encoder
/// passes and classifier multiply-accumulates are counted as they run.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    pub params: ModelParams,
    encoder_calls: AtomicU64,
    classifier_macs: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config,
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            encoder_calls: AtomicU64::new(self.encoder_calls()),
            classifier_macs: AtomicU64::new(self.classifier_macs()),
        }
    }
}

struct SequenceCache {
    layers: Vec<encoder::LayerCache>,
}

/// A completed forward pass over a batch with the loss already evaluated.
/// Consuming it with [`BatchForward::backward`] yields the gradients.
pub struct BatchForward<'a> {
    model: &'a Model,
    bundles: &'a [TokenBundle],
    caches: Vec<SequenceCache>,
    /// Gradient of the loss with respect to every label's hidden row, in
    /// bundle then label order.
    hidden_grad: Array2<f64>,
    head_grads: ModelParams,
    pub loss: LossBreakdown,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, &vocab, &mut crate::seeded_rng(seed));
        Ok(Self::assemble(config, vocab, params))
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if !params.same_shapes(&ModelParams::zeros(&config, &vocab)) {
            return Err(Error::invalid(
                "parameter shapes do not match the configuration and vocabulary",
            ));
        }
        Ok(Self::assemble(config, vocab, params))
    }

    fn assemble(config: ModelConfig, vocab: Vocabulary, params: ModelParams) -> Self {
        Model {
            config,
            vocab,
            params,
            encoder_calls: AtomicU64::new(0),
            classifier_macs: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn token_space(&self) -> TokenSpace {
        TokenSpace::new(&self.vocab)
    }

    /// Encoder passes run so far.
    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    /// Classifier multiply-accumulates performed by the inference kernels.
    pub fn classifier_macs(&self) -> u64 {
        self.classifier_macs.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.encoder_calls.store(0, Ordering::Relaxed);
        self.classifier_macs.store(0, Ordering::Relaxed);
    }

    /// `E^0`: per-position sum of item, category, position and segment rows.
    pub fn embed(&self, bundle: &TokenBundle) -> Result<Array2<f64>> {
        let p = &self.params;
        let l = bundle.len();
        if l > self.config.max_len {
            return Err(Error::invalid(format!(
                "bundle length {l} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if bundle.categories.len() != l || bundle.segments.len() != l || bundle.positions.len() != l {
            return Err(Error::invalid("token sequences differ in length"));
        }
        let mut e = Array2::zeros((l, self.config.dim));
        for i in 0..l {
            let item = bundle.items[i] as usize;
            let cat = bundle.categories[i] as usize;
            let pos = bundle.positions[i] as usize;
            let seg = bundle.segments[i] as usize;
            if item >= p.item_embedding.nrows()
                || cat >= p.category_embedding.nrows()
                || pos >= p.position_embedding.nrows()
                || seg >= 2
            {
                return Err(Error::invalid(format!("token id out of range at position {i}")));
            }
            let mut row = e.row_mut(i);
            row += &p.item_embedding.row(item);
            row += &p.category_embedding.row(cat);
            row += &p.position_embedding.row(pos);
            row += &p.segment_embedding.row(seg);
        }
        Ok(e)
    }

    fn run_layers(
        &self,
        e0: Array2<f64>,
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<(Array2<f64>, Vec<encoder::LayerCache>)> {
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = e0;
        let mut caches = Vec::with_capacity(self.params.layers.len());
        for (i, layer) in self.params.layers.iter().enumerate() {
            let drop = dropout.as_deref_mut().map(|r| (self.config.dropout, r));
            let (y, cache) = encoder::layer_forward(&x, layer, self.config.heads, drop);
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// `E^H` from `E^0`, without dropout.
    pub fn encode(&self, e0: Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.run_layers(e0, None)?.0)
    }

    /// Per-layer, per-head attention matrices for `e0`.
    pub fn attention_weights(&self, e0: Array2<f64>) -> Result<Vec<Vec<Array2<f64>>>> {
        let (_, caches) = self.run_layers(e0, None)?;
        Ok(caches.into_iter().map(|c| c.attention).collect())
    }

    pub fn hidden(&self, bundle: &TokenBundle) -> Result<Array2<f64>> {
        self.encode(self.embed(bundle)?)
    }

    fn count(&self, macs: usize) {
        self.classifier_macs.fetch_add(macs as u64, Ordering::Relaxed);
    }

    fn counted_probs(&self, rows: &Array2<f64>, head: &Linear) -> Array2<f64> {
        self.count(rows.nrows() * head.input_dim() * head.output_dim());
        heads::probabilities(rows, head)
    }

    /// Flat softmax over all `M` items for every row.
    pub fn flat_probs(&self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        if self.params.flat_head.output_dim() == 0 {
            return Err(Error::invalid("model has no flat classifier head"));
        }
        Ok(self.counted_probs(rows, &self.params.flat_head))
    }

    /// Category distribution for every row.
    pub fn category_probs(&self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        if self.params.category_head.output_dim() == 0 {
            return Err(Error::invalid("model has no category classifier head"));
        }
        Ok(self.counted_probs(rows, &self.params.category_head))
    }

    /// Distribution over the members of `category` for one row.
    pub fn local_probs(&self, row: ArrayView1<f64>, category: CategoryId) -> Result<Array1<f64>> {
        let x = row.to_owned().insert_axis(Axis(0));
        Ok(self.local_probs_rows(&x, category)?.remove_axis(Axis(0)))
    }

    /// Distribution over the members of `category` for every row.
    pub fn local_probs_rows(&self, rows: &Array2<f64>, category: CategoryId) -> Result<Array2<f64>> {
        let head = self
            .params
            .local_heads
            .get(category as usize)
            .ok_or_else(|| Error::invalid(format!("no local head for category {category}")))?;
        Ok(self.counted_probs(rows, head))
    }

    pub fn classify_vanilla(&self, e: ArrayView1<f64>) -> Result<Vec<f64>> {
        let x = e.to_owned().insert_axis(Axis(0));
        Ok(self.flat_probs(&x)?.remove_axis(Axis(0)).to_vec())
    }

    pub fn classify_two_stage(&self, e: ArrayView1<f64>) -> Result<TwoStageOutput> {
        let x = e.to_owned().insert_axis(Axis(0));
        let category_probs = self.category_probs(&x)?.remove_axis(Axis(0)).to_vec();
        let category = heads::argmax(category_probs.iter().copied()) as CategoryId;
        let local_probs = self.local_probs(e, category)?.to_vec();
        Ok(TwoStageOutput {
            category_probs,
            category,
            local_probs,
        })
    }

    /// Runs every bundle through the network, evaluates the configured loss
    /// over all labels, and prepares the head gradients. Dropout applies
    /// only when `dropout` is given.
    pub fn forward_batch<'a>(
        &'a self,
        bundles: &'a [TokenBundle],
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<BatchForward<'a>> {
        let d = self.config.dim;
        let total_labels: usize = bundles.iter().map(|b| b.labels.len()).sum();
        if total_labels == 0 {
            return Err(Error::invalid("batch carries no labels"));
        }
        let mut caches = Vec::with_capacity(bundles.len());
        let mut hidden = Array2::zeros((total_labels, d));
        let mut labels = Vec::with_capacity(total_labels);
        for bundle in bundles {
            let e0 = self.embed(bundle)?;
            let (out, layers) = self.run_layers(e0, dropout.as_deref_mut())?;
            for l in &bundle.labels {
                hidden.row_mut(labels.len()).assign(&out.row(l.position));
                labels.push(*l);
            }
            caches.push(SequenceCache { layers });
        }

        let mut head_grads = ModelParams::zeros(&self.config, &self.vocab);
        let p = &self.params;
        let out = match self.config.classifier {
            ClassifierMode::Vanilla => heads::flat_loss(
                &hidden,
                &labels,
                &p.flat_head,
                self.config.epsilon,
                &mut head_grads.flat_head,
            ),
            ClassifierMode::TwoStage => heads::two_stage_loss(
                &hidden,
                &labels,
                bundles.len(),
                &p.category_head,
                &p.local_heads,
                &self.vocab,
                self.config.epsilon,
                &mut head_grads.category_head,
                &mut head_grads.local_heads,
            ),
        };
        Ok(BatchForward {
            model: self,
            bundles,
            caches,
            hidden_grad: out.hidden,
            head_grads,
            loss: out.loss,
        })
    }

    /// Loss of a batch without dropout.
    pub fn loss(&self, bundles: &[TokenBundle]) -> Result<LossBreakdown> {
        Ok(self.forward_batch(bundles, None)?.loss)
    }
}

impl BatchForward<'_> {
    /// Gradients of the batch loss for every parameter. PAD embedding rows
    /// always receive zero.
    pub fn backward(self) -> ModelParams {
        let model = self.model;
        let heads = model.config.heads;
        let mut grads = self.head_grads;
        let mut next_label = 0;
        for (bundle, cache) in self.bundles.iter().zip(self.caches) {
            let mut dx = Array2::zeros((bundle.len(), model.config.dim));
            for l in &bundle.labels {
                let mut row = dx.row_mut(l.position);
                row += &self.hidden_grad.row(next_label);
                next_label += 1;
            }
            for (i, layer_cache) in cache.layers.iter().enumerate().rev() {
                dx = encoder::layer_backward(
                    &dx,
                    layer_cache,
                    &model.params.layers[i],
                    &mut grads.layers[i],
                    heads,
                );
            }
            for i in 0..bundle.len() {
                let g = dx.row(i);
                let mut r = grads.item_embedding.row_mut(bundle.items[i] as usize);
                r += &g;
                let mut r = grads.category_embedding.row_mut(bundle.categories[i] as usize);
                r += &g;
                let mut r = grads.position_embedding.row_mut(bundle.positions[i] as usize);
                r += &g;
                let mut r = grads.segment_embedding.row_mut(bundle.segments[i] as usize);
                r += &g;
            }
        }
        grads.zero_pad_rows();
        grads
    }
}

#[cfg(test)]
mod tests;
