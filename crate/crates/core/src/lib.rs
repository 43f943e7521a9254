//! Federated-learning simulator with fairness-aware bidirectional top-k
//! gradient sparsification and online adaptation of the sparsity degree `k`.
//!
//! The pieces, bottom up:
//!
//! - [`vector`], [`rng`]: dense/sparse arithmetic and seeded streams
//! - [`model`], [`data`]: softmax regression and a one-hidden-layer MLP,
//!   synthetic and CSV datasets, non-i.i.d. partitioning
//! - [`sparsify`]: FAB-top-k selection and the baseline exchange strategies
//! - [`timing`]: normalised round-time model and stochastic rounding
//! - [`controller`], [`probe`]: online `k` controllers and the loss probe
//!   that estimates their derivative sign
//! - [`regret`]: synthetic convex cost families for checking regret bounds
//! - [`config`], [`harness`]: TOML experiments, the round loop, metrics files

pub mod config;
pub mod controller;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod probe;
pub mod regret;
pub mod rng;
pub mod sparsify;
pub mod timing;
pub mod vector;

pub use config::{ExperimentConfig, SweepConfig};
pub use controller::{Controller, ControllerKind, ExtendedSignDescent, SearchInterval, SignDescent, SignFeedback};
pub use error::{Error, Result};
pub use harness::{run_experiment, simulate, sweep, RoundRecord, RunOutcome, RunStatus, Summary};
pub use model::{Model, Sample};
pub use sparsify::{fab_select, ClientState, SelectionResult, StrategyKind};
pub use timing::{round_time, stochastic_round, TimingConfig};
pub use vector::{top_k_indices, DenseVector, SparseGradient};
