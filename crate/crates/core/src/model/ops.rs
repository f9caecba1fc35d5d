//! Dense kernels shared by the encoder and the classifier heads.

use ndarray::{Array1, Array2, ArrayView2, Axis};

pub(crate) const LN_EPS: f64 = 1e-12;

/// Row-wise softmax, in place.
pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// Layer norm over each row. Returns the output, the normalised input and
/// the per-row reciprocal standard deviation.
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * rstd.view().insert_axis(Axis(1));
    let y = &xhat * gamma + beta;
    (y, xhat, rstd)
}

/// Backward of [`layer_norm`]: returns `dx` and accumulates the affine
/// gradients.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &Array1<f64>,
    gamma: &Array2<f64>,
    dgamma: &mut Array2<f64>,
    dbeta: &mut Array2<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *dgamma += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gamma;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dot = (&dxhat * xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - mean_dxhat.view().insert_axis(Axis(1));
    dx -= &(xhat * &mean_dot.view().insert_axis(Axis(1)));
    dx * rstd.view().insert_axis(Axis(1))
}

/// Exact GELU, `x * Phi(x)`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `x W + b` for row-major activations.
pub(crate) fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn softmax_rows_normalise() {
        let mut x = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((x[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // x * Phi(x) with Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_standardised() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 5.0, 2.0]];
        let g = Array2::ones((1, 4));
        let b = Array2::zeros((1, 4));
        let (y, _, _) = layer_norm(&x, &g, &b);
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 2.0], [0.5, 0.1, -0.4]];
        let g = array![[1.5, -0.7, 0.9]];
        let b = array![[0.1, 0.2, -0.3]];
        let w = array![[0.2, -1.0, 0.4], [1.1, 0.3, -0.6]];
        let loss = |x: &Array2<f64>| (&layer_norm(x, &g, &b).0 * &w).sum();
        let (_, xhat, rstd) = layer_norm(&x, &g, &b);
        let (mut dg, mut db) = (Array2::zeros((1, 3)), Array2::zeros((1, 3)));
        let dx = layer_norm_backward(&w, &xhat, &rstd, &g, &mut dg, &mut db);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[[i, j]] += h;
                m[[i, j]] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(scores in prop::collection::vec(-5.0f64..5.0, 1..40), k in 1usize..50) {
            let mut all: Vec<usize> = (0..scores.len()).collect();
            all.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
            all.truncate(k);
            prop_assert_eq!(top_k(&scores, k), all);
        }
    }
}
