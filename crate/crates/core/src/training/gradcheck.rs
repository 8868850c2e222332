//! Central finite-difference verification of [`backward`].

use crate::model::{AdapterSet, FreezeMask, ParameterStore, Tensor};

use super::{backward, batch_loss, Batch, TrainError};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(parameter, flat index, analytic, numeric)` at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn tensor_mut<'a>(store: &'a mut ParameterStore, adapters: &'a mut AdapterSet, name: &str) -> &'a mut Tensor {
    match store.tensor_mut(name) {
        Some(t) => t,
        None => adapters.tensor_mut(name).expect("name validated by mask"),
    }
}

/// Compares every trainable element's analytic gradient against
/// `(L(θ+ε) − L(θ−ε)) / (θ₊ − θ₋)`, where `θ±` are the perturbed values as
/// actually stored in `f32`.
///
/// `stride` > 1 checks every `stride`-th element of each tensor.
pub fn check_gradients(
    store: &ParameterStore,
    adapters: &AdapterSet,
    batch: &Batch,
    mask: &FreezeMask,
    eps: f32,
    stride: usize,
) -> Result<GradCheckReport, TrainError> {
    let analytic = backward(store, adapters, batch, mask)?.grads;
    let mut s = store.clone();
    let mut a = adapters.clone();
    let mut report = GradCheckReport { checked: 0, max_relative_error: 0.0, worst: None };
    for (name, grad) in analytic.iter() {
        for idx in (0..grad.len()).step_by(stride.max(1)) {
            let orig = tensor_mut(&mut s, &mut a, name).data()[idx];
            let plus = orig + eps;
            let minus = orig - eps;
            tensor_mut(&mut s, &mut a, name).data_mut()[idx] = plus;
            let lp = batch_loss(&s, &a, batch)?.loss;
            tensor_mut(&mut s, &mut a, name).data_mut()[idx] = minus;
            let lm = batch_loss(&s, &a, batch)?.loss;
            tensor_mut(&mut s, &mut a, name).data_mut()[idx] = orig;
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let err = relative_error(grad[idx], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((name.to_string(), idx, grad[idx], numeric));
                }
            }
        }
    }
    Ok(report)
}
