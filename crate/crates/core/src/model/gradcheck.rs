use super::Model;
use crate::masker::TokenBundle;
use crate::Result;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
}

/// Compares every analytic gradient entry with a central difference of
/// step `h` (dropout off), skipping the frozen PAD rows. The error of an entry is
/// `|a - n| / max(|a|, |n|, floor)`, where the floor keeps entries that are
/// zero up to rounding from dividing by noise.
pub fn check_gradients(
    model: &mut Model,
    bundles: &[TokenBundle],
    h: f64,
    floor: f64,
) -> Result<GradientReport> {
    let grads = model.forward_batch(bundles, None)?.backward();
    let analytic: Vec<(String, usize, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.ncols(), t.iter().copied().collect()))
        .collect();
    let frozen_row = |name: &str, rows: usize| match name {
        "embedding.item" => Some(rows - 4),
        "embedding.category" => Some(rows - 1),
        _ => None,
    };
    let mut report = GradientReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: (String::new(), 0),
    };
    for (ti, (name, cols, values)) in analytic.iter().enumerate() {
        let frozen = frozen_row(name, values.len() / cols.max(&1));
        for (k, &a) in values.iter().enumerate() {
            // PAD rows are constants of the model, not parameters
            if *cols > 0 && Some(k / cols) == frozen {
                continue;
            }
            let original = tensor_entry(model, ti, k);
            set_entry(model, ti, k, original + h);
            let plus = model.loss(bundles)?.total;
            set_entry(model, ti, k, original - h);
            let minus = model.loss(bundles)?.total;
            set_entry(model, ti, k, original);
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (name.clone(), k);
            }
        }
    }
    Ok(report)
}

fn tensor_entry(model: &Model, tensor: usize, k: usize) -> f64 {
    let slots = model.params.tensors();
    slots[tensor].1.as_slice().expect("contiguous tensor")[k]
}

fn set_entry(model: &mut Model, tensor: usize, k: usize, value: f64) {
    let mut slots = model.params.tensors_mut();
    slots[tensor].1.as_slice_mut().expect("contiguous tensor")[k] = value;
}
