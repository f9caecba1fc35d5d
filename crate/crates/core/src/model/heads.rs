//! Classifier heads and their losses. Gradients are produced together with
//! the loss, with respect to both the head weights and the hidden rows.

use ndarray::{Array2, Axis};

use super::ops::softmax_rows;
use super::params::Linear;
use crate::corpus::Vocabulary;
use crate::masker::Label;

/// Loss value split into its parts. For the flat head `category` is zero
/// and `local` carries the whole loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub category: f64,
    pub local: f64,
    pub labels: usize,
    /// Labels whose category was predicted correctly and so reached a
    /// local head. Equal to `labels` for the flat head.
    pub gated: usize,
}

pub(crate) struct HeadGrad {
    pub loss: LossBreakdown,
    /// Gradient with respect to each label's hidden row.
    pub hidden: Array2<f64>,
}

/// Softmax of `x W + b` over the rows of `x`.
pub(crate) fn probabilities(x: &Array2<f64>, head: &Linear) -> Array2<f64> {
    let mut p = x.dot(&head.w) + &head.b;
    softmax_rows(&mut p);
    p
}

fn accumulate(x: &Array2<f64>, dlogits: &Array2<f64>, head: &Linear, grad: &mut Linear) -> Array2<f64> {
    grad.w += &x.t().dot(dlogits);
    grad.b += &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
    dlogits.dot(&head.w.t())
}

/// Cross entropy of the flat head, averaged as `sum / (labels + eps)` so
/// that it coincides with the two-stage loss for a single category.
pub(crate) fn flat_loss(
    hidden: &Array2<f64>,
    labels: &[Label],
    head: &Linear,
    eps: f64,
    grad: &mut Linear,
) -> HeadGrad {
    let mut dlogits = probabilities(hidden, head);
    let denom = labels.len() as f64 + eps;
    let mut sum = 0.0;
    for (i, l) in labels.iter().enumerate() {
        sum -= dlogits[[i, l.item as usize]].ln();
        dlogits[[i, l.item as usize]] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / denom);
    let loss = sum / denom;
    HeadGrad {
        loss: LossBreakdown {
            total: loss,
            category: 0.0,
            local: loss,
            labels: labels.len(),
            gated: labels.len(),
        },
        hidden: accumulate(hidden, &dlogits, head, grad),
    }
}

/// Index of the largest entry; ties go to the lower index.
pub(crate) fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Category loss averaged over `batch_size` samples plus the mean over
/// categories of the gated local losses. A label reaches its true
/// category's local head only when the category head's argmax is correct;
/// the gate itself carries no gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn two_stage_loss(
    hidden: &Array2<f64>,
    labels: &[Label],
    batch_size: usize,
    category_head: &Linear,
    local_heads: &[Linear],
    vocab: &Vocabulary,
    eps: f64,
    category_grad: &mut Linear,
    local_grads: &mut [Linear],
) -> HeadGrad {
    let n = local_heads.len();
    let mut dcat = probabilities(hidden, category_head);
    let mut gate = vec![false; labels.len()];
    let mut cat_sum = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let c = l.category as usize;
        gate[i] = argmax(dcat.row(i).iter().copied()) == c;
        cat_sum -= dcat[[i, c]].ln();
        dcat[[i, c]] -= 1.0;
    }
    dcat.mapv_inplace(|v| v / batch_size as f64);
    let category = cat_sum / batch_size as f64;
    let mut dhidden = accumulate(hidden, &dcat, category_head, category_grad);

    let mut local = 0.0;
    for c in 0..n {
        let rows: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i].category as usize == c && gate[i])
            .collect();
        if rows.is_empty() {
            // numerator and gradient are both zero
            continue;
        }
        let denom = rows.len() as f64 + eps;
        let x = hidden.select(Axis(0), &rows);
        let mut dlogits = probabilities(&x, &local_heads[c]);
        let mut sum = 0.0;
        for (r, &i) in rows.iter().enumerate() {
            let target = vocab.local_index(labels[i].item);
            sum -= dlogits[[r, target]].ln();
            dlogits[[r, target]] -= 1.0;
        }
        local += sum / denom;
        dlogits.mapv_inplace(|v| v / denom / n as f64);
        let dx = accumulate(&x, &dlogits, &local_heads[c], &mut local_grads[c]);
        for (r, &i) in rows.iter().enumerate() {
            let mut row = dhidden.row_mut(i);
            row += &dx.row(r);
        }
    }
    let local = local / n as f64;
    HeadGrad {
        loss: LossBreakdown {
            total: category + local,
            category,
            local,
            labels: labels.len(),
            gated: gate.iter().filter(|&&g| g).count(),
        },
        hidden: dhidden,
    }
}
