use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassifierMode, ModelConfig};
use crate::corpus::Vocabulary;
use crate::masker::TokenSpace;

const INIT_STD: f64 = 0.02;

/// `y = x W + b` with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Array2::zeros((input, output)),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attention_norm: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNormParams,
}

/// Every trainable tensor. Heads not used by the configured classifier mode
/// are stored with zero output width: a vanilla model has an empty category
/// head and no local heads, a two-stage model an empty flat head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub item_embedding: Array2<f64>,
    pub category_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub segment_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub flat_head: Linear,
    pub category_head: Linear,
    pub local_heads: Vec<Linear>,
}

fn truncated_normal(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break v;
        }
    })
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config` and `vocab`.
    pub fn zeros(config: &ModelConfig, vocab: &Vocabulary) -> Self {
        let d = config.dim;
        let space = TokenSpace::new(vocab);
        let norm = || LayerNormParams {
            gamma: Array2::zeros((1, d)),
            beta: Array2::zeros((1, d)),
        };
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                output: Linear::zeros(d, d),
                attention_norm: norm(),
                ffn_in: Linear::zeros(d, 4 * d),
                ffn_out: Linear::zeros(4 * d, d),
                ffn_norm: norm(),
            })
            .collect();
        let (flat, cat, local) = match config.classifier {
            ClassifierMode::Vanilla => (vocab.num_items(), 0, Vec::new()),
            ClassifierMode::TwoStage => (0, vocab.num_categories(), vocab.category_sizes()),
        };
        ModelParams {
            item_embedding: Array2::zeros((space.item_rows(), d)),
            category_embedding: Array2::zeros((space.category_rows(), d)),
            position_embedding: Array2::zeros((config.max_len, d)),
            segment_embedding: Array2::zeros((2, d)),
            layers,
            flat_head: Linear::zeros(d, flat),
            category_head: Linear::zeros(d, cat),
            local_heads: local.into_iter().map(|m| Linear::zeros(d, m)).collect(),
        }
    }

    /// Truncated-normal weights (std 0.02, cut at two deviations), zero
    /// biases, unit layer-norm gains and zero PAD embeddings.
    pub fn init(config: &ModelConfig, vocab: &Vocabulary, rng: &mut impl Rng) -> Self {
        let mut params = Self::zeros(config, vocab);
        for (name, t) in params.tensors_mut() {
            if name.ends_with(".gamma") {
                t.fill(1.0);
            } else if !name.ends_with(".b") && !name.ends_with(".beta") {
                *t = truncated_normal(t.dim(), rng);
            }
        }
        params.zero_pad_rows();
        params
    }

    /// Restores the all-zero PAD rows of the item and category tables.
    pub fn zero_pad_rows(&mut self) {
        let item_pad = self.item_embedding.nrows() - 4;
        let cat_pad = self.category_embedding.nrows() - 1;
        self.item_embedding.row_mut(item_pad).fill(0.0);
        self.category_embedding.row_mut(cat_pad).fill(0.0);
    }

    /// Tensors in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("embedding.item".into(), &self.item_embedding),
            ("embedding.category".into(), &self.category_embedding),
            ("embedding.position".into(), &self.position_embedding),
            ("embedding.segment".into(), &self.segment_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let linears = [
                ("query", &l.query),
                ("key", &l.key),
                ("value", &l.value),
                ("output", &l.output),
                ("ffn_in", &l.ffn_in),
                ("ffn_out", &l.ffn_out),
            ];
            for (name, lin) in linears {
                out.push((format!("layer{i}.{name}.w"), &lin.w));
                out.push((format!("layer{i}.{name}.b"), &lin.b));
            }
            for (name, n) in [("attention_norm", &l.attention_norm), ("ffn_norm", &l.ffn_norm)] {
                out.push((format!("layer{i}.{name}.gamma"), &n.gamma));
                out.push((format!("layer{i}.{name}.beta"), &n.beta));
            }
        }
        out.push(("head.flat.w".into(), &self.flat_head.w));
        out.push(("head.flat.b".into(), &self.flat_head.b));
        out.push(("head.category.w".into(), &self.category_head.w));
        out.push(("head.category.b".into(), &self.category_head.b));
        for (j, h) in self.local_heads.iter().enumerate() {
            out.push((format!("head.local{j}.w"), &h.w));
            out.push((format!("head.local{j}.b"), &h.b));
        }
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("embedding.item".into(), &mut self.item_embedding),
            ("embedding.category".into(), &mut self.category_embedding),
            ("embedding.position".into(), &mut self.position_embedding),
            ("embedding.segment".into(), &mut self.segment_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let linears = [
                ("query", &mut l.query),
                ("key", &mut l.key),
                ("value", &mut l.value),
                ("output", &mut l.output),
                ("ffn_in", &mut l.ffn_in),
                ("ffn_out", &mut l.ffn_out),
            ];
            for (name, lin) in linears {
                out.push((format!("layer{i}.{name}.w"), &mut lin.w));
                out.push((format!("layer{i}.{name}.b"), &mut lin.b));
            }
            for (name, n) in [
                ("attention_norm", &mut l.attention_norm),
                ("ffn_norm", &mut l.ffn_norm),
            ] {
                out.push((format!("layer{i}.{name}.gamma"), &mut n.gamma));
                out.push((format!("layer{i}.{name}.beta"), &mut n.beta));
            }
        }
        out.push(("head.flat.w".into(), &mut self.flat_head.w));
        out.push(("head.flat.b".into(), &mut self.flat_head.b));
        out.push(("head.category.w".into(), &mut self.category_head.w));
        out.push(("head.category.b".into(), &mut self.category_head.b));
        for (j, h) in self.local_heads.iter_mut().enumerate() {
            out.push((format!("head.local{j}.w"), &mut h.w));
            out.push((format!("head.local{j}.b"), &mut h.b));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Euclidean norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.dim() == tb.dim())
    }
}
