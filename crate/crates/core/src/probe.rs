//! Derivative-sign estimation from live training.
//!
//! Each round every client picks one sample from its minibatch and evaluates
//! the loss at three points: the previous weights, the new weights, and the
//! weights a smaller selection `k′ = k − δ/2` would have produced. From the
//! averaged losses the server estimates how long `k′` would have needed to
//! achieve the same loss decrease,
//!
//! ```text
//! τ̂(k′) = θ(k′) · (L_prev − L_cur) / (L_prev − L_alt)
//! ```
//!
//! and the controller moves against `sign((τ(k) − τ̂(k′)) / (k − k′))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{SearchInterval, SignFeedback};
use crate::error::{contract, Result};
use crate::model::{Model, Sample};
use crate::rng::SimRng;
use crate::sparsify::{fab_select, SelectionResult};
use crate::vector::{sparse_axpy_in_place, DenseVector, SparseGradient};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub loss_prev: f64,
    pub loss_cur: f64,
    pub loss_alt: f64,
    /// Round time actually spent with `k`.
    pub theta_k: f64,
    /// Round time a `k′` selection would have taken.
    pub theta_alt: f64,
    pub k: f64,
    pub k_alt: f64,
}

/// Picks one sample per client from its minibatch and averages the
/// per-sample losses at each of `points`.
///
/// `batches[i]` holds indices into `shards[i]`. Returns one unweighted mean
/// per point.
pub fn collect_probes(
    model: &Model,
    shards: &[&[Sample]],
    batches: &[Vec<usize>],
    points: &[&[f64]],
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    if shards.is_empty() || shards.len() != batches.len() {
        return Err(contract("one minibatch per client required"));
    }
    let mut sums = vec![0.0; points.len()];
    for (shard, batch) in shards.iter().zip(batches) {
        if batch.is_empty() {
            return Err(contract("probe needs a nonempty minibatch"));
        }
        let h = batch[rng.random_range(0..batch.len())];
        let sample = shard
            .get(h)
            .ok_or_else(|| contract(format!("minibatch index {h} out of range")))?;
        for (sum, w) in sums.iter_mut().zip(points) {
            *sum += model.sample_loss(w, sample)?;
        }
    }
    let n = shards.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// The probe point `k′ = k − δ/2`, projected onto the search interval.
///
/// At the bottom of the interval the projection would give `k′ = k`, so the
/// lower bound falls back to 1 there.
pub fn probe_point(k: f64, delta: f64, interval: Option<SearchInterval>) -> f64 {
    let raw = k - delta / 2.0;
    let lo = interval.map_or(1.0, |iv| iv.min()).max(1.0);
    if k > lo {
        raw.max(lo)
    } else {
        raw.max(1.0)
    }
}

/// Estimated time for `k′` to cover the loss decrease `k` achieved, or `None`
/// when either probe loss failed to decrease.
pub fn estimate_tau_alt(rec: &ProbeRecord) -> Option<f64> {
    let gain_cur = rec.loss_prev - rec.loss_cur;
    let gain_alt = rec.loss_prev - rec.loss_alt;
    if gain_cur <= 0.0 || gain_alt <= 0.0 {
        return None;
    }
    Some(rec.theta_alt * gain_cur / gain_alt)
}

/// Estimated derivative `(τ(k) − τ̂(k′)) / (k − k′)`.
pub fn estimate_derivative(tau_k: f64, tau_alt: f64, k: f64, k_alt: f64) -> Result<f64> {
    if !(k > k_alt) {
        return Err(contract(format!("probe point k' = {k_alt} must be below k = {k}")));
    }
    Ok((tau_k - tau_alt) / (k - k_alt))
}

pub fn estimate_sign(tau_k: f64, tau_alt: f64, k: f64, k_alt: f64) -> Result<SignFeedback> {
    Ok(SignFeedback::of(estimate_derivative(tau_k, tau_alt, k, k_alt)?))
}

/// Weights that a `k_alt`-element selection over the same uploads would have
/// produced from `w_prev`.
///
/// Each report is cut to its top-`k_alt` entries (exactly what the client
/// would have sent with the smaller `k`). Client accumulators are not touched.
pub fn build_alt_weights(
    w_prev: &DenseVector,
    reports: &[SparseGradient],
    k_alt: usize,
    eta: f64,
    counts: &[usize],
) -> Result<(DenseVector, SelectionResult)> {
    let k_alt = k_alt.max(1);
    let truncated: Vec<SparseGradient> = reports.iter().map(|r| r.truncate_top(k_alt)).collect();
    let selection = fab_select(&truncated, k_alt, counts)?;
    let mut w = w_prev.clone();
    sparse_axpy_in_place(&mut w, &selection.aggregate, -eta)?;
    Ok((w, selection))
}
