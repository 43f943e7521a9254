//! Synthetic testbed for the online `k` controllers.
//!
//! A [`SyntheticCostFamily`] fixes a time-per-unit-loss function
//! `t(k, l) = profile(l) · t̃(k)` where `t̃` is convex over the integers
//! `1..=D` and extended to real `k` by linear interpolation (the expected cost
//! of stochastic rounding), and a loss schedule `L_0 > L_1 > ... > L_M` that
//! does not depend on the chosen `k`. Round `m` then costs
//!
//! ```text
//! τ_m(k) = t(k) · ∫_{L_m}^{L_{m-1}} profile(l) dl
//! ```
//!
//! which is convex in `k` with the same minimiser `k*` every round, so the
//! regret of any `k` sequence against `k*` can be computed exactly.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{ExtendedSignDescent, SearchInterval, SignDescent, SignFeedback};
use crate::error::{contract, Error, Result};
use crate::rng::{self, Stream};

/// Convex cost `t̃(k)` over integer `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostShape {
    /// `comm · k + comp / k^β`: communication grows with `k`, the number of
    /// rounds needed shrinks with it.
    CommCompute { comm: f64, comp: f64, beta: f64 },
    /// `level + left·(k* − k)` below `k*`, `level + right·(k − k*)` above.
    VShape { k_star: f64, left: f64, right: f64, level: f64 },
    /// `level + curvature·(k − k*)²`.
    Quadratic { k_star: f64, curvature: f64, level: f64 },
}

impl CostShape {
    fn at(&self, k: f64) -> f64 {
        match *self {
            CostShape::CommCompute { comm, comp, beta } => comm * k + comp / k.powf(beta),
            CostShape::VShape { k_star, left, right, level } => {
                if k < k_star {
                    level + left * (k_star - k)
                } else {
                    level + right * (k - k_star)
                }
            }
            CostShape::Quadratic { k_star, curvature, level } => level + curvature * (k - k_star).powi(2),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            CostShape::CommCompute { comm, comp, beta } => comm >= 0.0 && comp >= 0.0 && beta > 0.0,
            CostShape::VShape { left, right, level, .. } => left > 0.0 && right > 0.0 && level >= 0.0,
            CostShape::Quadratic { curvature, level, .. } => curvature > 0.0 && level >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cost shape {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCostFamily {
    shape: CostShape,
    dim: usize,
    /// `profile(l) = profile.0 + profile.1 · l`.
    profile: (f64, f64),
    /// `L_0, L_1, ..., L_M`.
    losses: Vec<f64>,
    /// `t̃(1), ..., t̃(D)`.
    table: Vec<f64>,
    k_star: usize,
}

impl SyntheticCostFamily {
    /// Builds a family from explicit per-round loss decrements ending at `loss_floor`.
    pub fn new(
        shape: CostShape,
        dim: usize,
        profile: (f64, f64),
        decrements: &[f64],
        loss_floor: f64,
    ) -> Result<Self> {
        shape.validate()?;
        if dim < 2 {
            return Err(Error::Config("cost family needs D >= 2".into()));
        }
        if !(profile.0 > 0.0 && profile.1 >= 0.0 && loss_floor >= 0.0) {
            return Err(Error::Config("profile must be positive on the loss range".into()));
        }
        if decrements.is_empty() || decrements.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Config("loss decrements must be positive".into()));
        }
        let mut losses = vec![loss_floor; decrements.len() + 1];
        for m in (0..decrements.len()).rev() {
            losses[m] = losses[m + 1] + decrements[m];
        }
        let table: Vec<f64> = (1..=dim).map(|k| shape.at(k as f64)).collect();
        if table.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Config("cost must be finite and nonnegative".into()));
        }
        let k_star = table
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i + 1)
            .unwrap_or(1);
        Ok(SyntheticCostFamily {
            shape,
            dim,
            profile,
            losses,
            table,
            k_star,
        })
    }

    /// A family with `horizon` rounds whose decrements are drawn uniformly
    /// from `[lo, hi]`.
    pub fn with_random_schedule(
        shape: CostShape,
        dim: usize,
        horizon: usize,
        decrement_range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        let (lo, hi) = decrement_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("decrement range must satisfy 0 < lo <= hi".into()));
        }
        let mut rng = rng::stream(seed, Stream::Noise, &[0xdec]);
        let decrements: Vec<f64> = (0..horizon)
            .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        Self::new(shape, dim, (1.0, 0.5), &decrements, 0.1)
    }

    /// The family used by the regret acceptance checks: `D = 1000`,
    /// `t̃(k) = 0.01 k + 50/k` (minimiser 71), 10⁴ rounds.
    pub fn default_family(seed: u64) -> Self {
        Self::with_random_schedule(
            CostShape::CommCompute {
                comm: 0.01,
                comp: 50.0,
                beta: 1.0,
            },
            1000,
            10_000,
            (1e-4, 3e-4),
            seed,
        )
        .expect("default family parameters are valid")
    }

    pub fn shape(&self) -> CostShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rounds `M` the loss schedule covers.
    pub fn horizon(&self) -> usize {
        self.losses.len() - 1
    }

    pub fn k_star(&self) -> f64 {
        self.k_star as f64
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    fn tilde(&self, k: usize) -> f64 {
        self.table[k - 1]
    }

    /// Interpolated `t(k)` (without the loss profile).
    pub fn t(&self, k: f64) -> f64 {
        let lo = k.floor() as usize;
        let frac = k - lo as f64;
        if frac == 0.0 {
            return self.tilde(lo);
        }
        (1.0 - frac) * self.tilde(lo) + frac * self.tilde(lo + 1)
    }

    /// `∫_{L_m}^{L_{m-1}} profile(l) dl`.
    pub fn round_weight(&self, m: usize) -> f64 {
        let (hi, lo) = (self.losses[m - 1], self.losses[m]);
        self.profile.0 * (hi - lo) + 0.5 * self.profile.1 * (hi * hi - lo * lo)
    }

    fn check(&self, m: usize, k: f64) -> Result<()> {
        if m == 0 || m > self.horizon() {
            return Err(contract(format!("round {m} outside 1..={}", self.horizon())));
        }
        if !(k >= 1.0 && k <= self.dim as f64) {
            return Err(contract(format!("k = {k} outside [1, {}]", self.dim)));
        }
        Ok(())
    }

    /// Expected time `τ_m(k)` of round `m` with randomised `k`.
    pub fn tau_m(&self, m: usize, k: f64) -> Result<f64> {
        self.check(m, k)?;
        Ok(self.t(k) * self.round_weight(m))
    }

    /// Left and right derivatives of `t` at `k` (infinite past the domain ends).
    fn one_sided_slopes(&self, k: f64) -> (f64, f64) {
        let lo = k.floor() as usize;
        if k > lo as f64 {
            let s = self.tilde(lo + 1) - self.tilde(lo);
            return (s, s);
        }
        let left = if lo > 1 {
            self.tilde(lo) - self.tilde(lo - 1)
        } else {
            f64::NEG_INFINITY
        };
        let right = if lo < self.dim {
            self.tilde(lo + 1) - self.tilde(lo)
        } else {
            f64::INFINITY
        };
        (left, right)
    }

    /// Sign of `τ'_m(k)`; zero when the subdifferential contains zero.
    pub fn exact_sign(&self, m: usize, k: f64) -> Result<SignFeedback> {
        self.check(m, k)?;
        let (left, right) = self.one_sided_slopes(k);
        Ok(if left > 0.0 {
            SignFeedback::Positive
        } else if right < 0.0 {
            SignFeedback::Negative
        } else {
            SignFeedback::Zero
        })
    }

    /// `g`: bound on `|∂t(k, l)/∂k|` over `k ∈ [1, D]` and the loss range.
    pub fn g(&self) -> f64 {
        let max_slope = self
            .table
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max);
        let max_profile = self.profile.0 + self.profile.1 * self.losses[0];
        max_slope * max_profile
    }

    /// `G = g · max_m (L_{m-1} − L_m)`.
    pub fn big_g(&self) -> f64 {
        let max_dec = self
            .losses
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max);
        self.g() * max_dec
    }
}

/// Flip probability `p` → noise factor `H = 1/(1 − 2p)`.
pub fn noise_factor(p: f64) -> f64 {
    1.0 / (1.0 - 2.0 * p)
}

/// `G H B √(2M)`; with `H = 1` this is the exact-sign bound.
pub fn regret_bound(big_g: f64, h: f64, width: f64, horizon: usize) -> f64 {
    big_g * h * width * (2.0 * horizon as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegretController {
    SignDescent,
    Extended { alpha: f64, update_window: usize },
    /// Stays at `k` forever.
    Pinned { k: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSpec {
    pub controller: RegretController,
    pub interval: SearchInterval,
    /// Probability each definite sign is flipped.
    pub flip_prob: f64,
    pub trials: usize,
    /// Fixed `k_1`; drawn uniformly from the interval per trial when absent.
    pub initial_k: Option<f64>,
    pub seed: u64,
}

/// Per-round costs of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub k: Vec<f64>,
    pub chosen: Vec<f64>,
    pub best: Vec<f64>,
    /// `R(m)` after each round.
    pub cumulative: Vec<f64>,
}

impl RegretTrace {
    pub fn regret_at(&self, horizon: usize) -> f64 {
        self.cumulative[horizon - 1]
    }
}

/// Regret statistics across trials at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretStats {
    pub horizon: usize,
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub bound: f64,
    pub violations: usize,
}

enum Driver {
    Sign(SignDescent),
    Extended(ExtendedSignDescent),
    Pinned(f64),
}

impl Driver {
    fn k(&self) -> f64 {
        match self {
            Driver::Sign(c) => c.k(),
            Driver::Extended(c) => c.k(),
            Driver::Pinned(k) => *k,
        }
    }

    fn step(&mut self, s: SignFeedback) {
        match self {
            Driver::Sign(c) => {
                c.step(s);
            }
            Driver::Extended(c) => {
                c.step(s);
            }
            Driver::Pinned(_) => {}
        }
    }
}

fn validate_spec(family: &SyntheticCostFamily, spec: &RegretSpec, horizon: usize) -> Result<()> {
    if !(0.0..0.5).contains(&spec.flip_prob) {
        return Err(Error::Config(format!(
            "flip probability {} must lie in [0, 0.5)",
            spec.flip_prob
        )));
    }
    if horizon == 0 || horizon > family.horizon() {
        return Err(Error::Config(format!(
            "horizon {horizon} outside 1..={}",
            family.horizon()
        )));
    }
    let iv = spec.interval;
    if iv.min() < 1.0 || iv.max() > family.dim() as f64 {
        return Err(Error::Config("search interval must lie inside [1, D]".into()));
    }
    if !iv.contains(family.k_star()) {
        return Err(Error::Config(format!(
            "k* = {} outside the search interval",
            family.k_star()
        )));
    }
    Ok(())
}

/// Runs one trial for `horizon` rounds.
pub fn run_trial(family: &SyntheticCostFamily, spec: &RegretSpec, trial: usize, horizon: usize) -> Result<RegretTrace> {
    validate_spec(family, spec, horizon)?;
    let mut trial_rng = rng::stream(spec.seed, Stream::Trial, &[trial as u64]);
    let mut noise = rng::stream(spec.seed, Stream::Noise, &[trial as u64]);
    let iv = spec.interval;
    let k1 = spec
        .initial_k
        .unwrap_or_else(|| trial_rng.random_range(iv.min()..=iv.max()));
    let mut driver = match spec.controller {
        RegretController::SignDescent => Driver::Sign(SignDescent::new(iv, k1)),
        RegretController::Extended { alpha, update_window } => {
            Driver::Extended(ExtendedSignDescent::new(iv, k1, alpha, update_window)?)
        }
        RegretController::Pinned { k } => Driver::Pinned(iv.project(k)),
    };
    let k_star = family.k_star();
    let mut trace = RegretTrace {
        k: Vec::with_capacity(horizon),
        chosen: Vec::with_capacity(horizon),
        best: Vec::with_capacity(horizon),
        cumulative: Vec::with_capacity(horizon),
    };
    let mut total = 0.0;
    for m in 1..=horizon {
        let k = driver.k();
        let chosen = family.tau_m(m, k)?;
        let best = family.tau_m(m, k_star)?;
        total += chosen - best;
        trace.k.push(k);
        trace.chosen.push(chosen);
        trace.best.push(best);
        trace.cumulative.push(total);

        let mut s = family.exact_sign(m, k)?;
        if spec.flip_prob > 0.0 && noise.random::<f64>() < spec.flip_prob {
            s = s.flipped();
        }
        driver.step(s);
    }
    Ok(trace)
}

/// Runs `spec.trials` trials up to the largest of `horizons` and reports
/// regret statistics at each horizon against `G H B √(2M)`.
pub fn run_regret_experiment(
    family: &SyntheticCostFamily,
    spec: &RegretSpec,
    horizons: &[usize],
) -> Result<Vec<RegretStats>> {
    let longest = horizons.iter().copied().max().unwrap_or(0);
    validate_spec(family, spec, longest)?;
    if spec.trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let mut per_horizon: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.trials); horizons.len()];
    for trial in 0..spec.trials {
        let trace = run_trial(family, spec, trial, longest)?;
        for (slot, &h) in per_horizon.iter_mut().zip(horizons) {
            slot.push(trace.regret_at(h));
        }
    }
    let h = noise_factor(spec.flip_prob);
    let width = spec.interval.width();
    Ok(horizons
        .iter()
        .zip(per_horizon)
        .map(|(&horizon, per_trial)| {
            let bound = regret_bound(family.big_g(), h, width, horizon);
            let mean = per_trial.iter().sum::<f64>() / per_trial.len() as f64;
            let max = per_trial.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let violations = per_trial.iter().filter(|r| **r > bound).count();
            RegretStats {
                horizon,
                per_trial,
                mean,
                max,
                bound,
                violations,
            }
        })
        .collect())
}

/// Writes `M,trial,R,bound,violated` rows.
pub fn write_regret_csv<W: Write>(out: W, stats: &[RegretStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["M", "trial", "R", "bound", "violated"])?;
    for s in stats {
        for (trial, r) in s.per_trial.iter().enumerate() {
            w.write_record([
                s.horizon.to_string(),
                trial.to_string(),
                r.to_string(),
                s.bound.to_string(),
                (*r > s.bound).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCostFamily {
        SyntheticCostFamily::with_random_schedule(
            CostShape::CommCompute {
                comm: 0.02,
                comp: 20.0,
                beta: 1.0,
            },
            200,
            500,
            (1e-3, 2e-3),
            5,
        )
        .unwrap()
    }

    #[test]
    fn integer_k_uses_table_directly() {
        let f = small();
        for k in [1usize, 7, 31, 200] {
            let expect = (0.02 * k as f64 + 20.0 / k as f64) * f.round_weight(3);
            assert!((f.tau_m(3, k as f64).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn minimiser_is_grid_minimum() {
        let f = small();
        assert_eq!(f.k_star(), 32.0); // √1000 ≈ 31.6, t̃(32) < t̃(31)
        let best = f.tau_m(10, f.k_star()).unwrap();
        for i in 0..10_000 {
            let k = 1.0 + 199.0 * i as f64 / 9_999.0;
            assert!(f.tau_m(10, k).unwrap() >= best - 1e-15);
        }
    }

    #[test]
    fn midpoint_convexity() {
        let f = small();
        let mut rng = rng::seeded(1);
        for _ in 0..1000 {
            let a = rng.random_range(1.0..200.0);
            let b = rng.random_range(1.0..200.0);
            let mid = f.tau_m(4, 0.5 * (a + b)).unwrap();
            let avg = 0.5 * (f.tau_m(4, a).unwrap() + f.tau_m(4, b).unwrap());
            assert!(mid <= avg + 1e-12);
        }
    }

    #[test]
    fn sign_around_minimiser() {
        let f = small();
        let ks = f.k_star();
        assert_eq!(f.exact_sign(1, ks).unwrap(), SignFeedback::Zero);
        assert_eq!(f.exact_sign(1, ks + 0.5).unwrap(), SignFeedback::Positive);
        assert_eq!(f.exact_sign(1, ks + 1.0).unwrap(), SignFeedback::Positive);
        assert_eq!(f.exact_sign(1, ks - 0.5).unwrap(), SignFeedback::Negative);
        assert_eq!(f.exact_sign(1, 1.0).unwrap(), SignFeedback::Negative);
        assert_eq!(f.exact_sign(1, 200.0).unwrap(), SignFeedback::Positive);
    }

    #[test]
    fn sign_matches_finite_difference() {
        let f = small();
        let mut rng = rng::seeded(2);
        for _ in 0..500 {
            let k: f64 = rng.random_range(1.0..199.0);
            // stay away from the interpolation kinks at integers
            if (k - k.round()).abs() < 1e-3 {
                continue;
            }
            let h = 1e-6;
            let fd = f.tau_m(2, k + h).unwrap() - f.tau_m(2, k - h).unwrap();
            assert_eq!(f.exact_sign(2, k).unwrap(), SignFeedback::of(fd), "k = {k}");
        }
    }

    #[test]
    fn bound_of_derivative_holds() {
        let f = small();
        for m in [1, 100, 500] {
            for k in 1..200 {
                let slope = f.tau_m(m, k as f64 + 1.0).unwrap() - f.tau_m(m, k as f64).unwrap();
                assert!(slope.abs() <= f.big_g() + 1e-12);
            }
        }
    }

    #[test]
    fn pinned_at_optimum_has_zero_regret() {
        let f = small();
        let spec = RegretSpec {
            controller: RegretController::Pinned { k: f.k_star() },
            interval: SearchInterval::new(1.0, 200.0).unwrap(),
            flip_prob: 0.0,
            trials: 3,
            initial_k: None,
            seed: 0,
        };
        let stats = run_regret_experiment(&f, &spec, &[100, 500]).unwrap();
        assert!(stats.iter().all(|s| s.max == 0.0 && s.violations == 0));
    }

    #[test]
    fn exact_signs_respect_bound() {
        let f = small();
        let spec = RegretSpec {
            controller: RegretController::SignDescent,
            interval: SearchInterval::new(1.0, 200.0).unwrap(),
            flip_prob: 0.0,
            trials: 20,
            initial_k: None,
            seed: 9,
        };
        for s in run_regret_experiment(&f, &spec, &[10, 100, 500]).unwrap() {
            assert_eq!(s.violations, 0, "M = {}", s.horizon);
            assert!(s.max > 0.0);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let f = small();
        let mut spec = RegretSpec {
            controller: RegretController::SignDescent,
            interval: SearchInterval::new(1.0, 200.0).unwrap(),
            flip_prob: 0.5,
            trials: 1,
            initial_k: None,
            seed: 0,
        };
        assert!(run_regret_experiment(&f, &spec, &[10]).is_err());
        spec.flip_prob = 0.1;
        assert!(run_regret_experiment(&f, &spec, &[501]).is_err());
        spec.interval = SearchInterval::new(50.0, 200.0).unwrap();
        assert!(run_regret_experiment(&f, &spec, &[10]).is_err());
    }

    #[test]
    fn flip_noise_with_zero_probability_is_exact() {
        let f = small();
        let base = RegretSpec {
            controller: RegretController::SignDescent,
            interval: SearchInterval::new(1.0, 200.0).unwrap(),
            flip_prob: 0.0,
            trials: 1,
            initial_k: Some(150.0),
            seed: 4,
        };
        let a = run_trial(&f, &base, 0, 300).unwrap();
        let b = run_trial(&f, &RegretSpec { seed: 5, ..base.clone() }, 0, 300).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rows() {
        let stats = vec![RegretStats {
            horizon: 10,
            per_trial: vec![1.0, 3.0],
            mean: 2.0,
            max: 3.0,
            bound: 2.5,
            violations: 1,
        }];
        let mut buf = Vec::new();
        write_regret_csv(&mut buf, &stats).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "M,trial,R,bound,violated\n10,0,1,2.5,false\n10,1,3,2.5,true\n");
    }
}
