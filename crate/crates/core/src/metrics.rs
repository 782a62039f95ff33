//! Per-layer transition rate, effective step sizes and latent-distribution
//! diagnostics.

use crate::error::{Error, Result};
use crate::quant::{count_codes_changed, Discretization, QuantRole, QuantizerSpec};
use crate::tensor::{Scalar, Tensor};

/// Snapshot of one quantized layer after one optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTransitionStats {
    pub n_weights: usize,
    /// Fraction of codes that changed in this step.
    pub tr: f64,
    /// Exponential moving average of `tr`.
    pub running_tr: f64,
    pub avg_ess_quantized: f64,
    pub avg_ess_latent: f64,
    pub mean_dist_to_tp: f64,
}

/// Fraction of positions whose discrete code changed.
pub fn compute_tr(prev_codes: &[i32], codes: &[i32]) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::invalid("compute_tr: layer has no quantized weights"));
    }
    let changed = count_codes_changed(prev_codes, codes)?;
    Ok(changed as f64 / codes.len() as f64)
}

/// `m * k_prev + (1 - m) * k`
pub fn update_running_tr(k_prev: f64, k: f64, m: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA momentum {m} outside [0, 1)")));
    }
    if !k_prev.is_finite() || !k.is_finite() {
        return Err(Error::NonFinite("update_running_tr"));
    }
    Ok(m * k_prev + (1.0 - m) * k)
}

/// Mean absolute elementwise change between two snapshots.
pub fn avg_effective_step_size<T: Scalar>(prev: &Tensor<T>, vals: &Tensor<T>) -> Result<f64> {
    if prev.shape() != vals.shape() {
        return Err(Error::shape(
            "avg_effective_step_size",
            format!("{:?} vs {:?}", prev.shape(), vals.shape()),
        ));
    }
    Ok(mean_abs_diff(prev.data(), vals.data()))
}

pub(crate) fn mean_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (y.as_f64() - x.as_f64()).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Same quantity computed from integer codes: `mean(|Δcode|) / gamma`.
pub fn avg_effective_step_size_codes(prev_codes: &[i32], codes: &[i32], gamma: f64) -> Result<f64> {
    if prev_codes.len() != codes.len() {
        return Err(Error::shape(
            "avg_effective_step_size_codes",
            format!("{} vs {} codes", prev_codes.len(), codes.len()),
        ));
    }
    if codes.is_empty() {
        return Ok(0.0);
    }
    let total: i64 = prev_codes
        .iter()
        .zip(codes)
        .map(|(&a, &b)| i64::from((b - a).abs()))
        .sum();
    Ok(total as f64 / gamma / codes.len() as f64)
}

/// Distance from a normalized value to the nearest point where the
/// discretizer changes its output.
pub fn distance_to_transition_point<T: Scalar>(wn: T, spec: &QuantizerSpec) -> f64 {
    let v = wn.as_f64();
    match (spec.discretization, spec.role) {
        (Discretization::Round, _) => (v - (v.floor() + 0.5)).abs(),
        (Discretization::Signum, QuantRole::Weight) => v.abs(),
        (Discretization::Signum, QuantRole::Activation) => (v - 0.5).abs(),
    }
}

/// Mean over `w_n` of [`distance_to_transition_point`].
pub fn mean_distance_to_transition_points<T: Scalar>(wn: &[T], spec: &QuantizerSpec) -> f64 {
    if wn.is_empty() {
        return 0.0;
    }
    wn.iter()
        .map(|&v| distance_to_transition_point(v, spec))
        .sum::<f64>()
        / wn.len() as f64
}

/// Histogram of normalized latent weights over `[alpha, beta]`.
pub fn latent_histogram<T: Scalar>(wn: &[T], spec: &QuantizerSpec, bins: usize) -> Vec<usize> {
    let mut hist = vec![0; bins.max(1)];
    let width = (spec.beta - spec.alpha) / hist.len() as f64;
    for &v in wn {
        let idx = ((v.as_f64() - spec.alpha) / width).floor();
        let idx = (idx.max(0.0) as usize).min(hist.len() - 1);
        hist[idx] += 1;
    }
    hist
}
