//! Experiment configuration.
//!
//! Configurations are TOML documents; every table rejects unknown keys. A
//! minimal run needs only a seed, a dataset, a strategy and a stopping rule:
//!
//! ```toml
//! id = "fab"
//! seed = 7
//!
//! [data]
//! source = "synthetic"
//! classes = 10
//! features = 199
//! samples_per_class = 200
//! clients = 20
//!
//! [strategy]
//! kind = "fab_topk"
//! k = 100
//!
//! [training]
//! max_rounds = 2000
//! target_loss = 0.4
//!
//! [timing]
//! comm_time_full = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerKind, SearchInterval};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sparsify::{StrategyConfig, StrategyKind};
use crate::timing::TimingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian class clusters, one class per client.
    Synthetic {
        classes: usize,
        features: usize,
        samples_per_class: usize,
        clients: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        /// Nonzero coordinates per class mean; dense when absent.
        #[serde(default)]
        support: Option<usize>,
        /// Held-out samples per class for accuracy.
        #[serde(default = "default_holdout")]
        holdout_per_class: usize,
    },
    /// Writer-partitioned CSV (`client_id,label,f0,...`).
    Csv {
        path: PathBuf,
        /// Optional held-out CSV with the same header; accuracy is measured
        /// on the training data when absent.
        #[serde(default)]
        eval_path: Option<PathBuf>,
    },
}

fn default_separation() -> f64 {
    4.0
}

fn default_noise() -> f64 {
    1.0
}

fn default_holdout() -> usize {
    50
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    #[default]
    Logistic,
    Mlp { hidden: usize },
}

impl ModelConfig {
    pub fn build(&self, input_dim: usize, classes: usize) -> Result<Model> {
        match *self {
            ModelConfig::Logistic => Model::logistic(input_dim, classes),
            ModelConfig::Mlp { hidden } => Model::mlp(input_dim, hidden, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub max_rounds: usize,
    /// Stop once the global training loss reaches this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
    /// Rounds between held-out accuracy evaluations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_batch() -> usize {
    32
}

fn default_eta() -> f64 {
    0.01
}

fn default_eval_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub kind: StrategyKind,
    /// Initial or fixed sparsity degree; defaults to `D` for send_all and
    /// is required otherwise.
    #[serde(default)]
    pub k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(default = "default_controller")]
    pub kind: ControllerKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_window")]
    pub update_window: usize,
    /// Defaults to `max(0.002 D, 2)`.
    #[serde(default)]
    pub k_min: Option<f64>,
    /// Defaults to `D`.
    #[serde(default)]
    pub k_max: Option<f64>,
    #[serde(default = "default_arms")]
    pub exp3_arms: usize,
    #[serde(default = "default_gamma")]
    pub exp3_gamma: f64,
    /// Defaults to `gamma / arms`.
    #[serde(default)]
    pub exp3_eta: Option<f64>,
    /// Sequence of `k_m` for the replay controller, given inline.
    #[serde(default)]
    pub sequence: Option<Vec<f64>>,
    /// A `rounds.jsonl` whose `k` column is replayed.
    #[serde(default)]
    pub replay_path: Option<PathBuf>,
}

fn default_controller() -> ControllerKind {
    ControllerKind::Fixed
}

fn default_alpha() -> f64 {
    1.5
}

fn default_window() -> usize {
    20
}

fn default_arms() -> usize {
    10
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            kind: default_controller(),
            alpha: default_alpha(),
            update_window: default_window(),
            k_min: None,
            k_max: None,
            exp3_arms: default_arms(),
            exp3_gamma: default_gamma(),
            exp3_eta: None,
            sequence: None,
            replay_path: None,
        }
    }
}

impl ControllerConfig {
    /// The search interval `[k_min, k_max]` for a model of dimension `dim`.
    pub fn interval(&self, dim: usize) -> Result<SearchInterval> {
        let d = dim as f64;
        let lo = self.k_min.unwrap_or((0.002 * d).max(2.0).min(d));
        let hi = self.k_max.unwrap_or(d);
        if !(lo >= 1.0 && hi <= d) {
            return Err(Error::Config(format!(
                "search interval [{lo}, {hi}] must lie within [1, {dim}]"
            )));
        }
        SearchInterval::new(lo, hi).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub strategy: StrategySection,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub timing: TimingConfig,
}

fn default_id() -> String {
    "run".to_string()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative dataset and replay paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataConfig::Csv { path, eval_path } = &mut self.data {
            fix(path);
            if let Some(p) = eval_path {
                fix(p);
            }
        }
        if let Some(p) = &mut self.controller.replay_path {
            fix(p);
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.eta > 0.0 && t.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", t.eta)));
        }
        if t.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be positive".into()));
        }
        if t.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if let Some(psi) = t.target_loss {
            if !(psi.is_finite() && psi >= 0.0) {
                return Err(Error::Config(format!("target_loss must be nonnegative, got {psi}")));
            }
        }
        self.timing.validate()?;
        if self.strategy.k.is_none() && self.strategy.kind != StrategyKind::SendAll {
            return Err(Error::Config(format!(
                "strategy {} needs k",
                self.strategy.kind
            )));
        }
        let c = &self.controller;
        if matches!(
            c.kind,
            ControllerKind::SignDescent | ControllerKind::Extended | ControllerKind::ValueDescent
        ) && self.strategy.kind != StrategyKind::FabTopk
        {
            return Err(Error::Config(format!(
                "controller {} probes with FAB selection and needs strategy fab_topk",
                c.kind
            )));
        }
        if c.kind == ControllerKind::Replay && c.sequence.is_none() && c.replay_path.is_none() {
            return Err(Error::Config("replay controller needs sequence or replay_path".into()));
        }
        if let Some(seq) = &c.sequence {
            if seq.is_empty() || seq.iter().any(|k| !k.is_finite()) {
                return Err(Error::Config("replay sequence must be nonempty and finite".into()));
            }
        }
        if let DataConfig::Synthetic {
            classes,
            features,
            samples_per_class,
            clients,
            ..
        } = self.data
        {
            if classes == 0 || features == 0 || samples_per_class == 0 || clients == 0 {
                return Err(Error::Config("synthetic data sizes must be positive".into()));
            }
        }
        Ok(())
    }

    /// The strategy with its resolved `k` for a model of dimension `dim`.
    pub fn strategy_for(&self, dim: usize) -> Result<StrategyConfig> {
        let k = self.strategy.k.unwrap_or(dim as f64);
        let s = StrategyConfig {
            kind: self.strategy.kind,
            k,
        };
        s.validate(dim)?;
        Ok(s)
    }
}

/// A grid of experiments sharing one base configuration.
///
/// Each list replaces the corresponding base value; an absent list keeps the
/// base value, an empty list yields an empty grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub grid: SweepGrid,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub comm_time: Option<Vec<f64>>,
    #[serde(default)]
    pub strategy: Option<Vec<StrategyKind>>,
    #[serde(default)]
    pub controller: Option<Vec<ControllerKind>>,
    #[serde(default)]
    pub seed: Option<Vec<u64>>,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Expands the grid in comm_time, strategy, controller, seed order.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let base = &self.base;
        let comm = self
            .grid
            .comm_time
            .clone()
            .unwrap_or_else(|| vec![base.timing.comm_time_full]);
        let strategies = self
            .grid
            .strategy
            .clone()
            .unwrap_or_else(|| vec![base.strategy.kind]);
        let controllers = self
            .grid
            .controller
            .clone()
            .unwrap_or_else(|| vec![base.controller.kind]);
        let seeds = self.grid.seed.clone().unwrap_or_else(|| vec![base.seed]);

        let mut out = Vec::new();
        for &c in &comm {
            for &s in &strategies {
                for &ctl in &controllers {
                    for &seed in &seeds {
                        let mut cfg = base.clone();
                        cfg.timing.comm_time_full = c;
                        cfg.strategy.kind = s;
                        cfg.controller.kind = ctl;
                        cfg.seed = seed;
                        cfg.id = format!("{}-c{c}-{s}-{ctl}-s{seed}", base.id);
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [data]
        source = "synthetic"
        classes = 4
        features = 9
        samples_per_class = 20
        clients = 4
        [strategy]
        kind = "fab_topk"
        k = 5
        [training]
        max_rounds = 10
    "#;

    #[test]
    fn defaults_are_filled_in() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.training.batch_size, 32);
        assert_eq!(cfg.training.eta, 0.01);
        assert_eq!(cfg.training.eval_every, 10);
        assert_eq!(cfg.controller.alpha, 1.5);
        assert_eq!(cfg.controller.update_window, 20);
        assert_eq!(cfg.controller.kind, ControllerKind::Fixed);
        assert_eq!(cfg.timing.compute_time, 1.0);
        assert_eq!(cfg.model, ModelConfig::Logistic);
        let iv = cfg.controller.interval(2000).unwrap();
        assert_eq!((iv.min(), iv.max()), (4.0, 2000.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for (needle, replacement) in [
            ("seed = 3", "seed = 3\ncolour = 1"),
            ("clients = 4", "clients = 4\nextra = 2"),
            ("k = 5", "k = 5\nkk = 1"),
            ("max_rounds = 10", "max_rounds = 10\nrounds = 3"),
        ] {
            let text = MINIMAL.replace(needle, replacement);
            assert!(ExperimentConfig::from_toml_str(&text).is_err(), "{replacement}");
        }
        let text = format!("{MINIMAL}\n[timing]\ncomm_time_full = 1\nlatency = 2\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn adaptive_controllers_need_fab() {
        let text = MINIMAL.replace("fab_topk", "fub_topk") + "\n[controller]\nkind = \"sign_descent\"\n";
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_expansion() {
        let text = format!(
            "[base]\n{}\n[grid]\ncomm_time = [0.1, 100]\nstrategy = [\"fab_topk\", \"send_all\"]\n",
            MINIMAL.replace("[data]", "[base.data]")
                .replace("[strategy]", "[base.strategy]")
                .replace("[training]", "[base.training]")
        );
        let sweep = SweepConfig::from_toml_str(&text).unwrap();
        let cfgs = sweep.expand();
        assert_eq!(cfgs.len(), 4);
        assert_eq!(cfgs[3].timing.comm_time_full, 100.0);
        assert_eq!(cfgs[3].strategy.kind, StrategyKind::SendAll);

        let mut empty = sweep.clone();
        empty.grid.strategy = Some(vec![]);
        assert!(empty.expand().is_empty());
    }
}
