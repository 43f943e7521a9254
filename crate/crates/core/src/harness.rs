//! Round orchestration, metrics and experiment sweeps.
//!
//! One round runs: pick `k_m` and round it, local minibatch gradients, the
//! strategy's exchange and update, the probe (alternative weights at
//! `k′ = k − δ/2` and three single-sample losses per client), timing, and
//! finally controller feedback. The global training loss and the held-out
//! accuracy are instrumentation and cost no simulated time.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ExperimentConfig, SweepConfig};
use crate::controller::{Controller, ControllerKind, Exp3, ExtendedSignDescent, Feedback, SignDescent, SignFeedback};
use crate::data::{self, FederatedDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Model, Sample};
use crate::probe::{build_alt_weights, probe_point, collect_probes, estimate_derivative, estimate_tau_alt, ProbeRecord};
use crate::rng::{self, SimRng, Stream};
use crate::sparsify::{baseline_round, ClientState, StrategyKind};
use crate::timing::{round_time, sparse_round_slots, stochastic_round};
use crate::vector::DenseVector;

/// Header of `summary.csv`.
pub const SUMMARY_HEADER: [&str; 8] = [
    "config_id",
    "comm_time",
    "strategy",
    "controller",
    "rounds",
    "sim_time",
    "final_loss",
    "final_acc",
];

/// Header of the sweep comparison table.
pub const SWEEP_HEADER: [&str; 7] = [
    "config_id",
    "comm_time",
    "strategy",
    "controller",
    "time_to_target",
    "final_acc",
    "status",
];

/// Loss above this multiple of the initial loss counts towards divergence.
const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive rounds above the threshold before a run is declared diverged.
const DIVERGENCE_PATIENCE: usize = 20;

/// One line of `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub m: usize,
    /// Controller output `k_m`.
    pub k: f64,
    /// `k_m` after stochastic rounding.
    pub k_used: usize,
    /// `|J|`, entries on the downlink.
    pub selected: usize,
    pub comm_slots: usize,
    pub round_time: f64,
    /// Simulated time including this round.
    pub sim_time: f64,
    /// Probe loss at the new weights.
    pub train_loss: f64,
    /// Loss of the global model over all training samples.
    pub global_loss: f64,
    pub eval_acc: Option<f64>,
    pub min_contribution: Option<usize>,
    pub k_alt: Option<usize>,
    pub tau_alt: Option<f64>,
    /// Sign fed to the controller; absent when unavailable or not probed.
    pub sign: Option<i8>,
    pub restart: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    ReachedTarget,
    MaxRounds,
    Diverged { round: usize, reason: String },
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_id: String,
    pub comm_time: f64,
    pub strategy: String,
    pub controller: String,
    pub rounds: usize,
    pub sim_time: f64,
    pub final_loss: f64,
    pub final_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub status: RunStatus,
    /// Simulated time at which the global loss first reached the target.
    pub time_to_target: Option<f64>,
    /// Smallest per-client contribution over the run.
    pub min_contribution: Option<usize>,
}

impl RunOutcome {
    pub fn k_sequence(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.k).collect()
    }
}

/// Model, training shards and held-out samples of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: Model,
    pub dataset: FederatedDataset,
    pub eval: Vec<Sample>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (dataset, eval) = match &cfg.data {
        DataConfig::Synthetic {
            classes,
            features,
            samples_per_class,
            clients,
            separation,
            noise,
            support,
            holdout_per_class,
        } => {
            let mut spec = SynthSpec::new(*classes, *features, *samples_per_class);
            spec.separation = *separation;
            spec.noise = *noise;
            spec.support = *support;
            let train = spec.generate(cfg.seed, 0)?;
            let eval = if *holdout_per_class > 0 {
                spec.samples_per_class = *holdout_per_class;
                spec.generate(cfg.seed, 1)?
            } else {
                Vec::new()
            };
            let fed = data::partition_one_class_per_client(train, *clients, cfg.seed)?;
            (fed, eval)
        }
        DataConfig::Csv { path, eval_path } => {
            let fed = data::partition_by_writer_csv(path)?;
            let eval = match eval_path {
                Some(p) => data::partition_by_writer_csv(p)?.into_shards().concat(),
                None => Vec::new(),
            };
            (fed, eval)
        }
    };
    let classes = eval
        .iter()
        .map(|s| s.label + 1)
        .max()
        .unwrap_or(0)
        .max(dataset.num_classes());
    let features = dataset.feature_dim();
    if let Some(s) = eval.iter().find(|s| s.features.len() != features) {
        return Err(Error::Dataset(format!(
            "held-out sample has {} features, training data has {features}",
            s.features.len()
        )));
    }
    let model = cfg.model.build(features, classes)?;
    Ok(Prepared { model, dataset, eval })
}

/// Reads the `k` column of a `rounds.jsonl`.
pub fn read_k_sequence(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoundRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        out.push(rec.k);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} holds no rounds", path.display())));
    }
    Ok(out)
}

fn build_controller(cfg: &ExperimentConfig, dim: usize, k1: f64) -> Result<Controller> {
    let c = &cfg.controller;
    Ok(match c.kind {
        ControllerKind::Fixed => Controller::Fixed(k1),
        ControllerKind::SignDescent => Controller::Sign(SignDescent::new(c.interval(dim)?, k1)),
        ControllerKind::ValueDescent => Controller::Value(SignDescent::new(c.interval(dim)?, k1)),
        ControllerKind::Extended => Controller::Extended(ExtendedSignDescent::new(
            c.interval(dim)?,
            k1,
            c.alpha,
            c.update_window,
        )?),
        ControllerKind::Exp3 => {
            let arms = Exp3::log_spaced_arms(c.interval(dim)?, c.exp3_arms);
            let eta = c.exp3_eta.unwrap_or(c.exp3_gamma / arms.len() as f64);
            let bandit = Exp3::new(arms, c.exp3_gamma, eta)?;
            Controller::exp3(bandit, rng::stream(cfg.seed, Stream::Controller, &[]))
        }
        ControllerKind::Replay => {
            let sequence = match (&c.sequence, &c.replay_path) {
                (Some(seq), _) => seq.clone(),
                (None, Some(p)) => read_k_sequence(p)?,
                (None, None) => {
                    return Err(Error::Config("replay controller needs a sequence".into()));
                }
            };
            Controller::Replay { sequence, pos: 0 }
        }
    })
}

fn global_loss(model: &Model, dataset: &FederatedDataset, weights: &[f64]) -> Result<f64> {
    let parts = dataset
        .shards()
        .par_iter()
        .map(|s| model.evaluate(weights, s.iter()).map(|r| r.loss * s.len() as f64))
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum::<f64>() / dataset.total() as f64)
}

fn accuracy(model: &Model, prepared: &Prepared, weights: &[f64]) -> Result<f64> {
    if prepared.eval.is_empty() {
        let mut correct = 0;
        for s in prepared.dataset.shards() {
            correct += model.evaluate(weights, s.iter())?.correct;
        }
        Ok(correct as f64 / prepared.dataset.total() as f64)
    } else {
        Ok(model.evaluate(weights, prepared.eval.iter())?.accuracy())
    }
}

/// Runs an experiment in memory.
pub fn simulate(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let prepared = prepare(cfg)?;
    simulate_prepared(cfg, &prepared, &mut |_, _| {})
}

/// Runs an experiment on already prepared data, calling `observe(m, w)` with
/// the global weights after every round.
pub fn simulate_prepared(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let model = prepared.model;
    let dim = model.dim();
    let strategy = cfg.strategy_for(dim)?;
    let kind = strategy.kind;
    let t = &cfg.training;
    let seed = cfg.seed;

    let w0 = model.init_weights(&mut rng::stream(seed, Stream::Init, &[]));
    let mut clients: Vec<ClientState> = prepared
        .dataset
        .shards()
        .iter()
        .enumerate()
        .map(|(i, s)| ClientState::new(i, w0.clone(), s.clone()))
        .collect();
    let counts: Vec<usize> = clients.iter().map(ClientState::count).collect();
    let mut batch_rngs: Vec<SimRng> = (0..clients.len())
        .map(|i| rng::stream(seed, Stream::Minibatch, &[i as u64]))
        .collect();
    let mut rounding_rng = rng::stream(seed, Stream::Rounding, &[]);
    let mut probe_rng = rng::stream(seed, Stream::Probe, &[]);
    let mut strategy_rng = rng::stream(seed, Stream::Strategy, &[]);

    let k1 = match cfg.controller.kind {
        ControllerKind::Fixed | ControllerKind::Replay => strategy.k,
        _ => cfg.controller.interval(dim)?.project(strategy.k),
    };
    let mut controller = build_controller(cfg, dim, k1)?;
    let probing = matches!(
        controller.kind(),
        ControllerKind::SignDescent | ControllerKind::Extended | ControllerKind::ValueDescent
    );

    let mut server = w0;
    let initial_loss = global_loss(&model, &prepared.dataset, &server)?;
    let mut records = Vec::new();
    let mut sim_time = 0.0;
    let mut above = 0;
    let mut best_rate: f64 = 0.0;
    let mut status = RunStatus::MaxRounds;
    let mut time_to_target = None;
    let mut min_contribution: Option<usize> = None;
    let mut last_acc = None;
    let mut final_loss = initial_loss;

    for m in 1..=t.max_rounds {
        let k_m = controller.k().clamp(1.0, dim as f64);
        let k_used = stochastic_round(k_m, dim, &mut rounding_rng)?;

        let batches: Vec<Vec<usize>> = clients
            .iter()
            .zip(batch_rngs.iter_mut())
            .map(|(c, r)| data::sample_minibatch(c.count(), t.batch_size, r))
            .collect();
        let grads = clients
            .par_iter()
            .zip(batches.par_iter())
            .map(|(c, b)| {
                let refs: Vec<&Sample> = b.iter().map(|&h| &c.samples[h]).collect();
                model.minibatch_gradient(&c.weights, &refs).map(|(g, _)| g)
            })
            .collect::<Result<Vec<DenseVector>>>()?;

        let w_prev = server.clone();
        let exchange = baseline_round(kind, k_used, &mut clients, &grads, t.eta, m, &mut strategy_rng)?;
        if kind != StrategyKind::Fedavg || exchange.comm_slots > 0 {
            server = clients[0].weights.clone();
        }
        if let Some(c) = exchange.min_contribution {
            min_contribution = Some(min_contribution.map_or(c, |x| x.min(c)));
        }
        let rt = round_time(&cfg.timing, exchange.comm_slots, dim);
        sim_time += rt.total;

        let shards: Vec<&[Sample]> = clients.iter().map(|c| c.samples.as_slice()).collect();
        let mut k_alt = None;
        let mut tau_alt = None;
        let train_loss;
        let feedback = if probing {
            let delta = controller.delta().unwrap_or(0.0);
            let k_alt_real = probe_point(k_m, delta, controller.interval());
            let reports = exchange
                .reports
                .as_ref()
                .ok_or_else(|| Error::Config("probing controller needs client reports".into()))?;
            let k_alt_int = stochastic_round(k_alt_real, dim, &mut probe_rng)?.min(k_used);
            let (w_alt, alt_sel) = build_alt_weights(&w_prev, reports, k_alt_int, t.eta, &counts)?;
            let uplink_alt = reports.iter().map(|r| r.len().min(k_alt_int.max(1))).max().unwrap_or(0);
            let theta_alt = round_time(&cfg.timing, sparse_round_slots(uplink_alt, alt_sel.len()), dim).total;
            let losses = collect_probes(&model, &shards, &batches, &[&w_prev, &server, &w_alt], &mut probe_rng)?;
            train_loss = losses[1];
            let rec = ProbeRecord {
                loss_prev: losses[0],
                loss_cur: losses[1],
                loss_alt: losses[2],
                theta_k: rt.total,
                theta_alt,
                k: k_m,
                k_alt: k_alt_real,
            };
            k_alt = Some(k_alt_int);
            tau_alt = estimate_tau_alt(&rec);
            match tau_alt {
                Some(ta) if k_m > k_alt_real => {
                    let d = estimate_derivative(rt.total, ta, k_m, k_alt_real)?;
                    Feedback {
                        sign: SignFeedback::of(d),
                        derivative: Some(d),
                        cost: None,
                    }
                }
                _ => Feedback::unavailable(),
            }
        } else {
            let losses = collect_probes(&model, &shards, &batches, &[&w_prev, &server], &mut probe_rng)?;
            train_loss = losses[1];
            let rate = (losses[0] - losses[1]) / rt.total;
            best_rate = best_rate.max(rate.abs());
            let reward = if best_rate > 0.0 {
                (rate / best_rate).clamp(0.0, 1.0)
            } else {
                0.0
            };
            Feedback {
                sign: SignFeedback::Unavailable,
                derivative: None,
                cost: Some(1.0 - reward),
            }
        };
        let step = controller.observe(feedback);

        observe(m, &server);
        let loss = global_loss(&model, &prepared.dataset, &server)?;
        final_loss = loss;
        let reached = t.target_loss.is_some_and(|psi| loss <= psi);
        let last = m == t.max_rounds || reached;
        let eval_acc = if m % t.eval_every == 0 || last {
            let a = accuracy(&model, prepared, &server)?;
            last_acc = Some(a);
            Some(a)
        } else {
            None
        };

        records.push(RoundRecord {
            m,
            k: k_m,
            k_used,
            selected: exchange.downlink,
            comm_slots: exchange.comm_slots,
            round_time: rt.total,
            sim_time,
            train_loss,
            global_loss: loss,
            eval_acc,
            min_contribution: exchange.min_contribution,
            k_alt,
            tau_alt,
            sign: feedback.sign.value(),
            restart: step.restarted,
        });

        if !loss.is_finite() {
            status = RunStatus::Diverged {
                round: m,
                reason: format!("global loss is {loss}"),
            };
            break;
        }
        above = if loss > DIVERGENCE_FACTOR * initial_loss { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            status = RunStatus::Diverged {
                round: m,
                reason: format!(
                    "loss above {DIVERGENCE_FACTOR}x the initial {initial_loss} for {DIVERGENCE_PATIENCE} rounds"
                ),
            };
            break;
        }
        if reached {
            time_to_target = Some(sim_time);
            status = RunStatus::ReachedTarget;
            break;
        }
    }

    let final_acc = match last_acc {
        Some(a) => a,
        None => accuracy(&model, prepared, &server)?,
    };
    let summary = Summary {
        config_id: cfg.id.clone(),
        comm_time: cfg.timing.comm_time_full,
        strategy: kind.to_string(),
        controller: controller.kind().to_string(),
        rounds: records.len(),
        sim_time,
        final_loss,
        final_acc,
    };
    Ok(RunOutcome {
        records,
        summary,
        status,
        time_to_target,
        min_contribution,
    })
}

/// Writes `rounds.jsonl`, one record per line.
pub fn write_rounds<W: Write>(out: W, records: &[RoundRecord]) -> Result<()> {
    let mut w = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `summary.csv` with its fixed header, even for zero rows.
pub fn write_summaries<W: Write>(out: W, rows: &[Summary]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg` and writes `rounds.jsonl` and `summary.csv` into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<RunOutcome> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    info!("running {} (seed {})", cfg.id, cfg.seed);
    let outcome = simulate(cfg)?;
    write_rounds(File::create(out_dir.join("rounds.jsonl"))?, &outcome.records)?;
    write_summaries(
        File::create(out_dir.join("summary.csv"))?,
        std::slice::from_ref(&outcome.summary),
    )?;
    if let RunStatus::Diverged { round, reason } = &outcome.status {
        warn!("{} diverged at round {round}: {reason}", cfg.id);
    }
    Ok(outcome)
}

/// One row of the sweep comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_id: String,
    pub comm_time: f64,
    pub strategy: String,
    pub controller: String,
    pub time_to_target: Option<f64>,
    pub final_acc: Option<f64>,
    pub status: String,
}

#[derive(Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<Summary>,
    /// Configurations that failed, with their errors.
    pub failures: Vec<(String, Error)>,
}

pub fn write_sweep_table<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every configuration of the grid (in parallel), writing each run
/// into `out_dir/<config_id>/` and the combined `summary.csv` and
/// `sweep.csv` into `out_dir`. Failed runs are reported and skipped.
pub fn sweep(configs: &[ExperimentConfig], out_dir: impl AsRef<Path>) -> Result<SweepResult> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let results: Vec<Result<RunOutcome>> = configs
        .par_iter()
        .map(|cfg| run_experiment(cfg, out_dir.join(&cfg.id)))
        .collect();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for (cfg, res) in configs.iter().zip(results) {
        let base = SweepRow {
            config_id: cfg.id.clone(),
            comm_time: cfg.timing.comm_time_full,
            strategy: cfg.strategy.kind.to_string(),
            controller: cfg.controller.kind.to_string(),
            time_to_target: None,
            final_acc: None,
            status: String::new(),
        };
        match res {
            Ok(o) => {
                let status = match &o.status {
                    RunStatus::ReachedTarget => "reached_target".to_string(),
                    RunStatus::MaxRounds => "max_rounds".to_string(),
                    RunStatus::Diverged { .. } => "diverged".to_string(),
                };
                rows.push(SweepRow {
                    time_to_target: o.time_to_target,
                    final_acc: Some(o.summary.final_acc),
                    status,
                    ..base
                });
                summaries.push(o.summary);
            }
            Err(e) => {
                warn!("{} failed: {e}", cfg.id);
                rows.push(SweepRow {
                    status: format!("error: {e}"),
                    ..base
                });
                failures.push((cfg.id.clone(), e));
            }
        }
    }
    write_summaries(File::create(out_dir.join("summary.csv"))?, &summaries)?;
    write_sweep_table(File::create(out_dir.join("sweep.csv"))?, &rows)?;
    Ok(SweepResult {
        rows,
        summaries,
        failures,
    })
}

/// Expands and runs a sweep file.
pub fn sweep_from(cfg: &SweepConfig, out_dir: impl AsRef<Path>) -> Result<SweepResult> {
    sweep(&cfg.expand(), out_dir)
}

/// Loss curves of two runs that start from different `k` and switch to a
/// common `k` once they reach the target loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub k_first: [f64; 2],
    pub k_common: f64,
    /// Round at which each run reached the target.
    pub switch_round: [usize; 2],
    /// `|L_a − L_b|` at equal offsets after the switch.
    pub differences: Vec<f64>,
    pub max_difference: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

/// Runs the switching experiment for `post_rounds` rounds after the switch.
/// The base config must set a target loss.
pub fn switch_report(
    base: &ExperimentConfig,
    k_first: [f64; 2],
    k_common: f64,
    post_rounds: usize,
    tolerance: f64,
) -> Result<SwitchReport> {
    if base.training.target_loss.is_none() {
        return Err(Error::Config("switching experiment needs a target loss".into()));
    }
    let prepared = prepare(base)?;
    let mut curves = Vec::new();
    let mut switch_round = [0; 2];
    for (i, &k) in k_first.iter().enumerate() {
        let mut first = base.clone();
        first.controller.kind = ControllerKind::Fixed;
        first.strategy.k = Some(k);
        let phase1 = simulate_prepared(&first, &prepared, &mut |_, _| {})?;
        if phase1.status != RunStatus::ReachedTarget {
            return Err(Error::Config(format!("k = {k} never reached the target loss")));
        }
        let r = phase1.records.len();
        switch_round[i] = r;
        let mut second = base.clone();
        second.training.target_loss = None;
        second.training.max_rounds = r + post_rounds;
        second.controller.kind = ControllerKind::Replay;
        second.controller.replay_path = None;
        let mut seq = vec![k; r];
        seq.push(k_common);
        second.controller.sequence = Some(seq);
        let full = simulate_prepared(&second, &prepared, &mut |_, _| {})?;
        curves.push(full.records[r..].iter().map(|x| x.global_loss).collect::<Vec<_>>());
    }
    let differences: Vec<f64> = curves[0]
        .iter()
        .zip(&curves[1])
        .map(|(a, b)| (a - b).abs())
        .collect();
    let max_difference = differences.iter().copied().fold(0.0, f64::max);
    Ok(SwitchReport {
        k_first,
        k_common,
        switch_round,
        differences,
        max_difference,
        tolerance,
        within_tolerance: max_difference <= tolerance,
    })
}

/// Output directory for a run: `out` itself, or `out/<id>` for sweeps.
pub fn run_dir(out: &Path, id: &str) -> PathBuf {
    out.join(id)
}
