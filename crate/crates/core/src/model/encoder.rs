//! Post-norm bidirectional Transformer layers with hand-written backward.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::ops::{affine, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows};
use super::params::{LayerParams, Linear};

/// Intermediates of one layer, kept for the backward pass.
pub(crate) struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `l x l` attention matrix per head.
    pub(crate) attention: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_keep: Option<Array2<f64>>,
    attn_xhat: Array2<f64>,
    attn_rstd: ndarray::Array1<f64>,
    normed: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_keep: Option<Array2<f64>>,
    ffn_xhat: Array2<f64>,
    ffn_rstd: ndarray::Array1<f64>,
}

/// Inverted dropout mask: kept entries scaled by `1 / (1 - p)`.
fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut impl Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

pub(crate) fn layer_forward<R: Rng>(
    x: &Array2<f64>,
    p: &LayerParams,
    heads: usize,
    dropout: Option<(f64, &mut R)>,
) -> (Array2<f64>, LayerCache) {
    let (l, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(x.view(), &p.query.w, &p.query.b);
    let k = affine(x.view(), &p.key.w, &p.key.b);
    let v = affine(x.view(), &p.value.w, &p.value.b);

    let mut context = Array2::zeros((l, d));
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        attention.push(scores);
    }
    let mut attn_out = affine(context.view(), &p.output.w, &p.output.b);

    let (mut attn_keep, mut ffn_keep) = (None, None);
    let mut rng = dropout.filter(|(rate, _)| *rate > 0.0);
    if let Some((rate, r)) = rng.as_mut() {
        let mask = dropout_mask((l, d), *rate, &mut **r);
        attn_out *= &mask;
        attn_keep = Some(mask);
    }
    let (normed, attn_xhat, attn_rstd) = layer_norm(
        &(x + &attn_out),
        &p.attention_norm.gamma,
        &p.attention_norm.beta,
    );

    let pre_act = affine(normed.view(), &p.ffn_in.w, &p.ffn_in.b);
    let act = pre_act.mapv(gelu);
    let mut ffn = affine(act.view(), &p.ffn_out.w, &p.ffn_out.b);
    if let Some((rate, r)) = rng.as_mut() {
        let mask = dropout_mask((l, d), *rate, &mut **r);
        ffn *= &mask;
        ffn_keep = Some(mask);
    }
    let (out, ffn_xhat, ffn_rstd) =
        layer_norm(&(&normed + &ffn), &p.ffn_norm.gamma, &p.ffn_norm.beta);

    let cache = LayerCache {
        input: x.clone(),
        q,
        k,
        v,
        attention,
        context,
        attn_keep,
        attn_xhat,
        attn_rstd,
        normed,
        pre_act,
        act,
        ffn_keep,
        ffn_xhat,
        ffn_rstd,
    };
    (out, cache)
}

fn linear_backward(x: &Array2<f64>, dy: &Array2<f64>, lin: &Linear, grad: &mut Linear) -> Array2<f64> {
    grad.w += &x.t().dot(dy);
    grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&lin.w.t())
}

/// Propagates `dout` through one layer, accumulating parameter gradients
/// into `grad`, and returns the gradient for the layer input.
pub(crate) fn layer_backward(
    dout: &Array2<f64>,
    c: &LayerCache,
    p: &LayerParams,
    grad: &mut LayerParams,
    heads: usize,
) -> Array2<f64> {
    let (l, d) = dout.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // ffn block
    let dsum2 = layer_norm_backward(
        dout,
        &c.ffn_xhat,
        &c.ffn_rstd,
        &p.ffn_norm.gamma,
        &mut grad.ffn_norm.gamma,
        &mut grad.ffn_norm.beta,
    );
    let mut dffn = dsum2.clone();
    if let Some(mask) = &c.ffn_keep {
        dffn *= mask;
    }
    let dact = linear_backward(&c.act, &dffn, &p.ffn_out, &mut grad.ffn_out);
    let dpre = &dact * &c.pre_act.mapv(gelu_grad);
    let mut dnormed = linear_backward(&c.normed, &dpre, &p.ffn_in, &mut grad.ffn_in);
    dnormed += &dsum2;

    // attention block
    let dsum1 = layer_norm_backward(
        &dnormed,
        &c.attn_xhat,
        &c.attn_rstd,
        &p.attention_norm.gamma,
        &mut grad.attention_norm.gamma,
        &mut grad.attention_norm.beta,
    );
    let mut dattn = dsum1.clone();
    if let Some(mask) = &c.attn_keep {
        dattn *= mask;
    }
    let dcontext = linear_backward(&c.context, &dattn, &p.output, &mut grad.output);
    let mut dq = Array2::zeros((l, d));
    let mut dk = Array2::zeros((l, d));
    let mut dv = Array2::zeros((l, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &c.attention[h];
        let dctx = dcontext.slice(cols);
        let da = dctx.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx));
        let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let dscores = (da - &row_dot) * a * scale;
        dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
    }
    let mut dx = dsum1;
    dx += &linear_backward(&c.input, &dq, &p.query, &mut grad.query);
    dx += &linear_backward(&c.input, &dk, &p.key, &mut grad.key);
    dx += &linear_backward(&c.input, &dv, &p.value, &mut grad.value);
    dx
}
