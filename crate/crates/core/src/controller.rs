//! Online choice of the sparsity degree `k`.
//!
//! The main controllers do projected descent on `k` using only the sign of
//! the derivative of the round cost: [`SignDescent`] with step
//! `δ_m = B/√(2m)`, and [`ExtendedSignDescent`] which additionally shrinks the
//! search interval when recent iterates stay within a narrow window and doing
//! so lowers the regret bound. [`SignDescent::value_step`] (descent on the
//! estimated derivative value) and [`Exp3`] are baselines.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Estimated or exact sign of `dτ_m/dk` at `k_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignFeedback {
    Negative,
    Zero,
    Positive,
    Unavailable,
}

impl SignFeedback {
    /// `sign(x)` with `sign(0) = 0`; NaN maps to unavailable.
    pub fn of(x: f64) -> Self {
        if x > 0.0 {
            SignFeedback::Positive
        } else if x < 0.0 {
            SignFeedback::Negative
        } else if x == 0.0 {
            SignFeedback::Zero
        } else {
            SignFeedback::Unavailable
        }
    }

    pub fn value(self) -> Option<i8> {
        match self {
            SignFeedback::Negative => Some(-1),
            SignFeedback::Zero => Some(0),
            SignFeedback::Positive => Some(1),
            SignFeedback::Unavailable => None,
        }
    }

    /// Flips a definite sign; zero and unavailable are left alone.
    pub fn flipped(self) -> Self {
        match self {
            SignFeedback::Negative => SignFeedback::Positive,
            SignFeedback::Positive => SignFeedback::Negative,
            other => other,
        }
    }
}

/// Closed search interval `[min, max]` for `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchInterval {
    min: f64,
    max: f64,
}

impl SearchInterval {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::Config(format!("invalid search interval [{min}, {max}]")));
        }
        Ok(SearchInterval { min, max })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// `B = k_max − k_min`.
    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    /// Closest point of the interval to `k`.
    pub fn project(&self, k: f64) -> f64 {
        k.clamp(self.min, self.max)
    }

    pub fn contains(&self, k: f64) -> bool {
        k >= self.min && k <= self.max
    }
}

/// Projected sign descent with step `δ_m = B/√(2m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignDescent {
    interval: SearchInterval,
    k: f64,
    m: usize,
}

impl SignDescent {
    pub fn new(interval: SearchInterval, initial_k: f64) -> Self {
        SignDescent {
            interval,
            k: interval.project(initial_k),
            m: 1,
        }
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// The round counter `m` of the next step.
    pub fn round(&self) -> usize {
        self.m
    }

    pub fn interval(&self) -> SearchInterval {
        self.interval
    }

    pub fn delta(&self) -> f64 {
        self.interval.width() / (2.0 * self.m as f64).sqrt()
    }

    /// `k ← P(k − δ_m s)`; an unavailable sign keeps `k` but still advances `m`.
    pub fn step(&mut self, s: SignFeedback) -> f64 {
        if let Some(v) = s.value() {
            self.k = self.interval.project(self.k - self.delta() * f64::from(v));
        }
        self.m += 1;
        self.k
    }

    /// `k ← P(k − δ_m d̂)` for an estimated derivative value.
    pub fn value_step(&mut self, derivative: Option<f64>) -> f64 {
        if let Some(d) = derivative.filter(|d| d.is_finite()) {
            self.k = self.interval.project(self.k - self.delta() * d);
        }
        self.m += 1;
        self.k
    }
}

/// Sign descent with shrinking search intervals.
///
/// Runs consecutive instances of [`SignDescent`]. Every `update_window`
/// rounds in which `k` moved, the extrema of those iterates, widened by
/// `alpha`, form a candidate interval of width `B′`. A new instance starts on
/// that interval when `B′ < (√2 − 1) B` and the current instance has run at
/// least as long as the previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedSignDescent {
    global: SearchInterval,
    interval: SearchInterval,
    k: f64,
    m: usize,
    /// Round at which the current instance started.
    instance_start: usize,
    /// `M′`: length of the previous instance.
    prev_len: usize,
    /// `M″`: length of the current instance so far.
    cur_len: usize,
    /// Rounds counted in the current window.
    window_count: usize,
    window_min: f64,
    window_max: f64,
    alpha: f64,
    update_window: usize,
    restarts: usize,
}

/// The restart test: `B′ < (√2 − 1) B` and `M″ ≥ M′`.
pub fn should_restart(new_width: f64, width: f64, cur_len: usize, prev_len: usize) -> bool {
    new_width < (std::f64::consts::SQRT_2 - 1.0) * width && cur_len >= prev_len
}

/// Window extrema widened by `alpha` and clipped to `global`: returns
/// `(max(min/α, k_min), min(α max, k_max))`.
pub fn widened_window(window_min: f64, window_max: f64, alpha: f64, global: SearchInterval) -> (f64, f64) {
    (
        (window_min / alpha).max(global.min()),
        (alpha * window_max).min(global.max()),
    )
}

/// Outcome of one controller step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub restarted: bool,
}

impl ExtendedSignDescent {
    pub fn new(global: SearchInterval, initial_k: f64, alpha: f64, update_window: usize) -> Result<Self> {
        if !(alpha >= 1.0) {
            return Err(Error::Config(format!("alpha must be >= 1, got {alpha}")));
        }
        if update_window == 0 {
            return Err(Error::Config("update window must be positive".into()));
        }
        Ok(ExtendedSignDescent {
            global,
            interval: global,
            k: global.project(initial_k),
            m: 1,
            instance_start: 1,
            prev_len: 0,
            cur_len: 0,
            window_count: 0,
            window_min: f64::INFINITY,
            window_max: 0.0,
            alpha,
            update_window,
            restarts: 0,
        })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn round(&self) -> usize {
        self.m
    }

    pub fn interval(&self) -> SearchInterval {
        self.interval
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }

    pub fn instance_start(&self) -> usize {
        self.instance_start
    }

    pub fn previous_instance_len(&self) -> usize {
        self.prev_len
    }

    pub fn current_instance_len(&self) -> usize {
        self.cur_len
    }

    /// `δ_m = B/√(2 max(1, m − m_0))`.
    pub fn delta(&self) -> f64 {
        let age = self.m.saturating_sub(self.instance_start).max(1);
        self.interval.width() / (2.0 * age as f64).sqrt()
    }

    pub fn step(&mut self, s: SignFeedback) -> StepInfo {
        let m = self.m;
        let old = self.k;
        if let Some(v) = s.value() {
            self.k = self.interval.project(self.k - self.delta() * f64::from(v));
        }
        self.cur_len = m - self.instance_start;
        // rounds where k did not move are left out of the window
        if self.k != old {
            self.window_min = self.window_min.min(self.k);
            self.window_max = self.window_max.max(self.k);
            self.window_count += 1;
        }
        let mut info = StepInfo::default();
        if self.window_count >= self.update_window {
            let (lo, hi) = widened_window(self.window_min, self.window_max, self.alpha, self.global);
            let new_width = hi - lo;
            if new_width > 0.0 && should_restart(new_width, self.interval.width(), self.cur_len, self.prev_len) {
                self.interval = SearchInterval { min: lo, max: hi };
                self.prev_len = self.cur_len;
                self.instance_start = m;
                self.k = self.interval.project(self.k);
                self.restarts += 1;
                info.restarted = true;
            }
            self.window_count = 0;
            self.window_min = f64::INFINITY;
            self.window_max = 0.0;
        }
        self.m += 1;
        info
    }
}

/// EXP3 over a finite grid of `k` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3 {
    arms: Vec<f64>,
    log_weights: Vec<f64>,
    gamma: f64,
    eta: f64,
}

impl Exp3 {
    /// `gamma` is the exploration mix, `eta` the learning rate applied to
    /// importance-weighted rewards.
    pub fn new(arms: Vec<f64>, gamma: f64, eta: f64) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::Config("EXP3 needs at least one arm".into()));
        }
        if !(0.0..=1.0).contains(&gamma) || !(eta >= 0.0) {
            return Err(Error::Config(format!("invalid EXP3 parameters gamma={gamma} eta={eta}")));
        }
        let n = arms.len();
        Ok(Exp3 {
            arms,
            log_weights: vec![0.0; n],
            gamma,
            eta,
        })
    }

    /// Up to `count` distinct integer arms spaced logarithmically over the interval.
    pub fn log_spaced_arms(interval: SearchInterval, count: usize) -> Vec<f64> {
        let lo = interval.min().max(1.0);
        let hi = interval.max();
        let mut arms: Vec<f64> = (0..count.max(1))
            .map(|i| {
                let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
                (lo * (hi / lo).powf(t)).round().clamp(lo.ceil(), hi.floor())
            })
            .collect();
        arms.dedup();
        arms
    }

    pub fn arms(&self) -> &[f64] {
        &self.arms
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.arms.len() as f64;
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        w.into_iter()
            .map(|x| (1.0 - self.gamma) * x / sum + self.gamma / n)
            .collect()
    }

    pub fn select(&self, rng: &mut SimRng) -> usize {
        let p = self.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }

    /// Feeds back the cost of the arm just played; costs outside `[0, 1]`
    /// are clamped.
    pub fn update(&mut self, arm: usize, cost: f64) {
        let mut c = cost;
        if !(0.0..=1.0).contains(&c) {
            warn!("EXP3 cost {cost} outside [0, 1], clamping");
            c = if c.is_nan() { 1.0 } else { c.clamp(0.0, 1.0) };
        }
        let p = self.probabilities()[arm];
        self.log_weights[arm] += self.eta * (1.0 - c) / p;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Fixed,
    SignDescent,
    Extended,
    ValueDescent,
    Exp3,
    Replay,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 6] = [
        ControllerKind::Fixed,
        ControllerKind::SignDescent,
        ControllerKind::Extended,
        ControllerKind::ValueDescent,
        ControllerKind::Exp3,
        ControllerKind::Replay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Fixed => "fixed",
            ControllerKind::SignDescent => "sign_descent",
            ControllerKind::Extended => "extended",
            ControllerKind::ValueDescent => "value_descent",
            ControllerKind::Exp3 => "exp3",
            ControllerKind::Replay => "replay",
        }
    }

    /// Whether this controller consumes probe feedback.
    pub fn is_adaptive(self) -> bool {
        !matches!(self, ControllerKind::Fixed | ControllerKind::Replay)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller kind {s:?}")))
    }
}

/// What the probe learned about the current round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub sign: SignFeedback,
    /// Estimated derivative `(τ − τ̂)/(k − k′)`.
    pub derivative: Option<f64>,
    /// Cost of the round in `[0, 1]` for bandit controllers.
    pub cost: Option<f64>,
}

impl Feedback {
    pub fn unavailable() -> Self {
        Feedback {
            sign: SignFeedback::Unavailable,
            derivative: None,
            cost: None,
        }
    }
}

/// A `k` controller as driven by the simulator.
#[derive(Debug, Clone)]
pub enum Controller {
    Fixed(f64),
    Sign(SignDescent),
    Extended(ExtendedSignDescent),
    Value(SignDescent),
    Exp3 {
        bandit: Exp3,
        arm: usize,
        rng: SimRng,
    },
    Replay {
        sequence: Vec<f64>,
        pos: usize,
    },
}

impl Controller {
    pub fn exp3(bandit: Exp3, mut rng: SimRng) -> Self {
        let arm = bandit.select(&mut rng);
        Controller::Exp3 { bandit, arm, rng }
    }

    pub fn kind(&self) -> ControllerKind {
        match self {
            Controller::Fixed(_) => ControllerKind::Fixed,
            Controller::Sign(_) => ControllerKind::SignDescent,
            Controller::Extended(_) => ControllerKind::Extended,
            Controller::Value(_) => ControllerKind::ValueDescent,
            Controller::Exp3 { .. } => ControllerKind::Exp3,
            Controller::Replay { .. } => ControllerKind::Replay,
        }
    }

    /// `k_m` for the coming round.
    pub fn k(&self) -> f64 {
        match self {
            Controller::Fixed(k) => *k,
            Controller::Sign(c) | Controller::Value(c) => c.k(),
            Controller::Extended(c) => c.k(),
            Controller::Exp3 { bandit, arm, .. } => bandit.arms()[*arm],
            Controller::Replay { sequence, pos } => sequence[(*pos).min(sequence.len() - 1)],
        }
    }

    /// Current search interval of the descent controllers.
    pub fn interval(&self) -> Option<SearchInterval> {
        match self {
            Controller::Sign(c) | Controller::Value(c) => Some(c.interval()),
            Controller::Extended(c) => Some(c.interval()),
            _ => None,
        }
    }

    /// Step size `δ_m` used to place the probe point `k′ = k − δ/2`.
    pub fn delta(&self) -> Option<f64> {
        match self {
            Controller::Sign(c) | Controller::Value(c) => Some(c.delta()),
            Controller::Extended(c) => Some(c.delta()),
            _ => None,
        }
    }

    pub fn observe(&mut self, feedback: Feedback) -> StepInfo {
        match self {
            Controller::Fixed(_) => StepInfo::default(),
            Controller::Sign(c) => {
                c.step(feedback.sign);
                StepInfo::default()
            }
            Controller::Extended(c) => c.step(feedback.sign),
            Controller::Value(c) => {
                c.value_step(feedback.derivative);
                StepInfo::default()
            }
            Controller::Exp3 { bandit, arm, rng } => {
                if let Some(cost) = feedback.cost {
                    bandit.update(*arm, cost);
                }
                *arm = bandit.select(rng);
                StepInfo::default()
            }
            Controller::Replay { pos, .. } => {
                *pos += 1;
                StepInfo::default()
            }
        }
    }
}
