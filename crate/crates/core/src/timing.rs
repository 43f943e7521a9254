//! Normalised time model.
//!
//! One round of local computation (all clients in parallel) costs
//! `compute_time`, and exchanging the full `D`-dimensional gradient both ways
//! costs `comm_time_full`. Sparse exchanges are charged in proportion to the
//! number of value-slots they move, where a dense round moves `2D` slots.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub comm_time_full: f64,
    #[serde(default = "default_compute_time")]
    pub compute_time: f64,
}

fn default_compute_time() -> f64 {
    1.0
}

impl TimingConfig {
    pub fn new(comm_time_full: f64) -> Self {
        TimingConfig {
            comm_time_full,
            compute_time: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.comm_time_full >= 0.0 && self.comm_time_full.is_finite()) {
            return Err(Error::Config(format!(
                "comm_time_full must be a nonnegative number, got {}",
                self.comm_time_full
            )));
        }
        if !(self.compute_time >= 0.0 && self.compute_time.is_finite()) {
            return Err(Error::Config(format!(
                "compute_time must be a nonnegative number, got {}",
                self.compute_time
            )));
        }
        Ok(())
    }
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig::new(10.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTime {
    pub compute: f64,
    pub comm: f64,
    pub total: f64,
}

/// Time of one round that moves `comm_slots` value-slots in a `dim`-dimensional model.
pub fn round_time(cfg: &TimingConfig, comm_slots: usize, dim: usize) -> RoundTime {
    let comm = if dim == 0 {
        0.0
    } else {
        cfg.comm_time_full * comm_slots as f64 / (2 * dim) as f64
    };
    RoundTime {
        compute: cfg.compute_time,
        comm,
        total: cfg.compute_time + comm,
    }
}

/// Value-slots of a top-k style round: `k` index-value pairs up (clients
/// upload in parallel) and `downlink` index-value pairs down.
pub fn sparse_round_slots(uplink: usize, downlink: usize) -> usize {
    2 * uplink + 2 * downlink
}

/// Randomised rounding with `E[result] = k`: `⌊k⌋` with probability
/// `⌈k⌉ − k`, otherwise `⌈k⌉`.
pub fn stochastic_round<R: Rng + ?Sized>(k: f64, max: usize, rng: &mut R) -> Result<usize> {
    if !(k >= 1.0 && k <= max as f64) {
        return Err(contract(format!("k = {k} outside [1, {max}]")));
    }
    let floor = k.floor();
    let frac = k - floor;
    if frac == 0.0 {
        return Ok(floor as usize);
    }
    let up = rng.random::<f64>() < frac;
    Ok(floor as usize + usize::from(up))
}
