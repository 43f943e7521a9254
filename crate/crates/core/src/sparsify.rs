//! Gradient exchange strategies.
//!
//! The central piece is the fairness-aware bidirectional top-k selection
//! ([`fab_select`]): every client uploads its top-k accumulated gradient
//! entries, the server picks the largest depth `κ` such that the union of all
//! clients' top-`κ` indices still fits in `k`, tops the set up to `k` with the
//! next-ranked candidates, and broadcasts the `C_i`-weighted aggregate on that
//! index set. Every client therefore lands at least `⌊k/N⌋` entries in the
//! global update.
//!
//! The remaining strategies are baselines: unidirectional top-k, fairness
//! unaware bidirectional top-k, periodic (random) k, FedAvg and dense
//! exchange.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::Sample;
use crate::rng::SimRng;
use crate::vector::{rank_cmp, sparse_axpy_in_place, top_k_indices, DenseVector, SparseGradient};

/// A client's replica of the model, its residual accumulator `a_i` and its data.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub weights: DenseVector,
    pub accumulator: Vec<f64>,
    pub samples: Vec<Sample>,
}

impl ClientState {
    pub fn new(id: usize, weights: DenseVector, samples: Vec<Sample>) -> Self {
        let dim = weights.dim();
        ClientState {
            id,
            weights,
            accumulator: vec![0.0; dim],
            samples,
        }
    }

    /// `C_i`.
    pub fn count(&self) -> usize {
        self.samples.len()
    }

    /// `a_i += g`.
    pub fn accumulate(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.accumulator.len() {
            return Err(contract("gradient length does not match accumulator"));
        }
        for (a, g) in self.accumulator.iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    pub fn report(&self, k: usize) -> Result<SparseGradient> {
        client_report(&self.accumulator, k)
    }
}

/// The `k` accumulator entries of largest magnitude, as index-value pairs.
pub fn client_report(accumulator: &[f64], k: usize) -> Result<SparseGradient> {
    let idx = top_k_indices(accumulator, k)?;
    SparseGradient::gather(accumulator, &idx)
}

/// Outcome of a server-side selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Global index set `J`, increasing.
    pub indices: Vec<usize>,
    /// `J ∩ J_i` for each client, increasing.
    pub contributed: Vec<Vec<usize>>,
    /// Truncation depth `κ` (equal to `k` for strategies without one).
    pub kappa: usize,
    /// Aggregated values `b_j` on `J`.
    pub aggregate: SparseGradient,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn min_contribution(&self) -> usize {
        self.contributed.iter().map(Vec::len).min().unwrap_or(0)
    }
}

fn check_reports(reports: &[SparseGradient], counts: &[usize]) -> Result<usize> {
    let first = reports
        .first()
        .ok_or_else(|| contract("selection needs at least one report"))?;
    if counts.len() != reports.len() {
        return Err(contract(format!(
            "{} reports but {} sample counts",
            reports.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(contract("every client needs C_i >= 1"));
    }
    let dim = first.dim();
    if reports.iter().any(|r| r.dim() != dim) {
        return Err(contract("reports disagree on dimension"));
    }
    Ok(dim)
}

/// `b_j = (1/C) Σ_i C_i a_ij 1[j ∈ J_i]` for each `j` in `indices`.
fn aggregate_on(
    reports: &[SparseGradient],
    counts: &[usize],
    indices: &[usize],
    dim: usize,
) -> Result<SparseGradient> {
    let total: usize = counts.iter().sum();
    let mut slot = HashMap::with_capacity(indices.len());
    for (p, &j) in indices.iter().enumerate() {
        slot.insert(j, p);
    }
    let mut sums = vec![0.0; indices.len()];
    for (report, &c) in reports.iter().zip(counts) {
        for &(j, v) in report.entries() {
            if let Some(&p) = slot.get(&j) {
                sums[p] += c as f64 * v;
            }
        }
    }
    let entries = indices
        .iter()
        .zip(sums)
        .map(|(&j, s)| (j, s / total as f64))
        .collect();
    SparseGradient::new(dim, entries)
}

fn contributions(reports: &[SparseGradient], in_j: &[bool]) -> Vec<Vec<usize>> {
    reports
        .iter()
        .map(|r| r.indices().filter(|&j| in_j[j]).collect())
        .collect()
}

/// Tracks the size of `∪_i J_i^κ` for varying depth.
struct UnionCounter<'a> {
    ranked: &'a [Vec<(usize, f64)>],
    stamp: Vec<u32>,
    epoch: u32,
}

impl<'a> UnionCounter<'a> {
    fn new(ranked: &'a [Vec<(usize, f64)>], dim: usize) -> Self {
        UnionCounter {
            ranked,
            stamp: vec![0; dim],
            epoch: 0,
        }
    }

    fn size(&mut self, depth: usize) -> usize {
        self.epoch += 1;
        let mut n = 0;
        for r in self.ranked {
            for &(j, _) in &r[..depth.min(r.len())] {
                if self.stamp[j] != self.epoch {
                    self.stamp[j] = self.epoch;
                    n += 1;
                }
            }
        }
        n
    }
}

/// Fairness-aware bidirectional top-k selection.
///
/// `reports[i]` is client `i`'s top-k upload `A_i` and `counts[i]` its sample
/// count `C_i`. The depth `κ` is the largest value in `[0, k]` with
/// `|∪_i J_i^κ| ≤ k`, found by binary search over the monotone union size.
/// When that union holds fewer than `k` indices, it is filled from
/// `∪_i J_i^{κ+1}` by decreasing `max_i |a_ij|` (ties to the lower index).
pub fn fab_select(reports: &[SparseGradient], k: usize, counts: &[usize]) -> Result<SelectionResult> {
    let dim = check_reports(reports, counts)?;
    if k == 0 {
        return Err(contract("k must be at least 1"));
    }
    if let Some(r) = reports.iter().find(|r| r.len() > k) {
        return Err(contract(format!("report with {} entries exceeds k = {k}", r.len())));
    }
    let ranked: Vec<Vec<(usize, f64)>> = reports.iter().map(SparseGradient::ranked).collect();
    let mut union = UnionCounter::new(&ranked, dim);

    // invariant: size(lo) <= k; size(hi + 1) > k or hi == k
    let (mut lo, mut hi) = (0usize, k);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if union.size(mid) <= k {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let kappa = lo;

    let mut in_j = vec![false; dim];
    let mut indices = Vec::with_capacity(k);
    for r in &ranked {
        for &(j, _) in &r[..kappa.min(r.len())] {
            if !in_j[j] {
                in_j[j] = true;
                indices.push(j);
            }
        }
    }

    if indices.len() < k && kappa < k {
        let mut best: HashMap<usize, f64> = HashMap::new();
        for r in &ranked {
            for &(j, v) in r {
                let e = best.entry(j).or_insert(0.0);
                *e = e.max(v.abs());
            }
        }
        let mut seen = vec![false; dim];
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        for r in &ranked {
            for &(j, _) in &r[kappa.min(r.len())..(kappa + 1).min(r.len())] {
                if !in_j[j] && !seen[j] {
                    seen[j] = true;
                    candidates.push((j, best[&j]));
                }
            }
        }
        candidates.sort_by(|a, b| rank_cmp(a.1, a.0, b.1, b.0));
        for (j, _) in candidates.into_iter().take(k - indices.len()) {
            in_j[j] = true;
            indices.push(j);
        }
    }
    if indices.len() < k {
        debug!("selection holds {} < k = {k} indices", indices.len());
    }
    indices.sort_unstable();

    let aggregate = aggregate_on(reports, counts, &indices, dim)?;
    Ok(SelectionResult {
        contributed: contributions(reports, &in_j),
        indices,
        kappa,
        aggregate,
    })
}

/// Unidirectional top-k: the downlink carries every reported index.
pub fn unidirectional_select(reports: &[SparseGradient], counts: &[usize]) -> Result<SelectionResult> {
    let dim = check_reports(reports, counts)?;
    let mut in_j = vec![false; dim];
    for r in reports {
        r.indices().for_each(|j| in_j[j] = true);
    }
    let indices: Vec<usize> = (0..dim).filter(|&j| in_j[j]).collect();
    let kappa = reports.iter().map(SparseGradient::len).max().unwrap_or(0);
    Ok(SelectionResult {
        aggregate: aggregate_on(reports, counts, &indices, dim)?,
        contributed: contributions(reports, &in_j),
        indices,
        kappa,
    })
}

/// Fairness-unaware bidirectional top-k: global top-k of the weighted
/// aggregate magnitude `|Σ_i C_i a_ij 1[j ∈ J_i]|`.
pub fn fub_select(reports: &[SparseGradient], k: usize, counts: &[usize]) -> Result<SelectionResult> {
    let full = unidirectional_select(reports, counts)?;
    let dim = full.aggregate.dim();
    let mut pool: Vec<(usize, f64)> = full.aggregate.entries().to_vec();
    pool.sort_by(|a, b| rank_cmp(a.1, a.0, b.1, b.0));
    pool.truncate(k);
    let mut in_j = vec![false; dim];
    pool.iter().for_each(|&(j, _)| in_j[j] = true);
    let aggregate = SparseGradient::from_unsorted(dim, pool)?;
    Ok(SelectionResult {
        indices: aggregate.indices().collect(),
        contributed: contributions(reports, &in_j),
        kappa: k,
        aggregate,
    })
}

/// Applies `w ← w − η b` at every client and zeroes `a_ij` for `j ∈ J ∩ J_i`.
///
/// All clients must hold bit-identical weights on entry; they hold
/// bit-identical weights on exit, which are also returned.
pub fn apply_and_reset(
    clients: &mut [ClientState],
    result: &SelectionResult,
    eta: f64,
) -> Result<DenseVector> {
    let first = clients
        .first()
        .ok_or_else(|| contract("no clients to update"))?
        .weights
        .clone();
    if let Some(c) = clients.iter().find(|c| !c.weights.bit_eq(&first)) {
        return Err(Error::Integrity(format!(
            "client {} weights diverged from client {}",
            c.id, clients[0].id
        )));
    }
    if result.contributed.len() != clients.len() {
        return Err(contract("selection was computed for a different client set"));
    }
    for (client, own) in clients.iter_mut().zip(&result.contributed) {
        sparse_axpy_in_place(&mut client.weights, &result.aggregate, -eta)?;
        for &j in own {
            client.accumulator[j] = 0.0;
        }
    }
    Ok(clients[0].weights.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FabTopk,
    UnidirectionalTopk,
    FubTopk,
    PeriodicK,
    Fedavg,
    SendAll,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::FabTopk,
        StrategyKind::UnidirectionalTopk,
        StrategyKind::FubTopk,
        StrategyKind::PeriodicK,
        StrategyKind::Fedavg,
        StrategyKind::SendAll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::FabTopk => "fab_topk",
            StrategyKind::UnidirectionalTopk => "unidirectional_topk",
            StrategyKind::FubTopk => "fub_topk",
            StrategyKind::PeriodicK => "periodic_k",
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::SendAll => "send_all",
        }
    }

    /// Whether clients keep residual accumulators under this strategy.
    pub fn uses_accumulators(self) -> bool {
        !matches!(self, StrategyKind::Fedavg | StrategyKind::SendAll)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy kind {s:?}")))
    }
}

/// A strategy together with its sparsity degree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Sparsity degree; may be fractional, in which case it is stochastically
    /// rounded each round.
    pub k: f64,
}

impl StrategyConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.k >= 1.0 && self.k <= dim as f64) {
            return Err(Error::Config(format!("k = {} outside [1, {dim}]", self.k)));
        }
        Ok(())
    }

    /// Rounds between weight averages for FedAvg: `⌊D/(2k)⌋`, at least 1.
    pub fn fedavg_period(&self, dim: usize, k: usize) -> usize {
        (dim / (2 * k.max(1))).max(1)
    }
}

/// What one round of exchange did.
#[derive(Debug, Clone)]
pub struct RoundExchange {
    /// Present for every strategy except FedAvg.
    pub selection: Option<SelectionResult>,
    /// Uplink reports, kept for the probe.
    pub reports: Option<Vec<SparseGradient>>,
    /// Communication in value-slots (an index costs one slot, a value one slot).
    pub comm_slots: usize,
    /// Number of global entries sent on the downlink.
    pub downlink: usize,
    /// `min_i |J ∩ J_i|`, for strategies that select per-client entries.
    pub min_contribution: Option<usize>,
}

/// Runs one round of `kind` given this round's local gradients.
///
/// `round` is 1-based and only matters for FedAvg's averaging period. `rng`
/// drives periodic-k's shared index draw.
pub fn baseline_round(
    kind: StrategyKind,
    k: usize,
    clients: &mut [ClientState],
    grads: &[DenseVector],
    eta: f64,
    round: usize,
    rng: &mut SimRng,
) -> Result<RoundExchange> {
    let n = clients.len();
    if n == 0 || grads.len() != n {
        return Err(contract("one gradient per client required"));
    }
    let dim = clients[0].weights.dim();
    if k == 0 || k > dim {
        return Err(contract(format!("k = {k} outside [1, {dim}]")));
    }
    let counts: Vec<usize> = clients.iter().map(ClientState::count).collect();

    match kind {
        StrategyKind::Fedavg => {
            for (c, g) in clients.iter_mut().zip(grads) {
                c.weights.add_scaled(g, -eta)?;
            }
            let period = (dim / (2 * k)).max(1);
            let sync = round.is_multiple_of(period);
            if sync {
                let avg = weighted_average(clients.iter().map(|c| &*c.weights), &counts);
                for c in clients.iter_mut() {
                    c.weights.copy_from_slice(&avg);
                }
            }
            Ok(RoundExchange {
                selection: None,
                reports: None,
                comm_slots: if sync { 2 * dim } else { 0 },
                downlink: if sync { dim } else { 0 },
                min_contribution: None,
            })
        }
        StrategyKind::SendAll => {
            let mean = weighted_average(grads.iter().map(|g| &**g), &counts);
            let aggregate = SparseGradient::new(dim, mean.into_iter().enumerate().collect())?;
            let selection = SelectionResult {
                indices: (0..dim).collect(),
                contributed: vec![(0..dim).collect(); n],
                kappa: dim,
                aggregate,
            };
            apply_and_reset(clients, &selection, eta)?;
            Ok(RoundExchange {
                selection: Some(selection),
                reports: None,
                comm_slots: 2 * dim,
                downlink: dim,
                min_contribution: Some(dim),
            })
        }
        StrategyKind::PeriodicK => {
            for (c, g) in clients.iter_mut().zip(grads) {
                c.accumulate(g)?;
            }
            let mut idx = rand::seq::index::sample(rng, dim, k).into_vec();
            idx.sort_unstable();
            let reports = clients
                .iter()
                .map(|c| SparseGradient::new(dim, idx.iter().map(|&j| (j, c.accumulator[j])).collect()))
                .collect::<Result<Vec<_>>>()?;
            let selection = unidirectional_select(&reports, &counts)?;
            apply_and_reset(clients, &selection, eta)?;
            Ok(RoundExchange {
                comm_slots: 4 * k,
                downlink: k,
                min_contribution: Some(selection.min_contribution()),
                selection: Some(selection),
                reports: Some(reports),
            })
        }
        StrategyKind::FabTopk | StrategyKind::UnidirectionalTopk | StrategyKind::FubTopk => {
            for (c, g) in clients.iter_mut().zip(grads) {
                c.accumulate(g)?;
            }
            let reports = clients
                .iter()
                .map(|c| c.report(k))
                .collect::<Result<Vec<_>>>()?;
            let selection = match kind {
                StrategyKind::FabTopk => fab_select(&reports, k, &counts)?,
                StrategyKind::FubTopk => fub_select(&reports, k, &counts)?,
                _ => unidirectional_select(&reports, &counts)?,
            };
            apply_and_reset(clients, &selection, eta)?;
            let uplink = reports.iter().map(SparseGradient::len).max().unwrap_or(0);
            Ok(RoundExchange {
                comm_slots: 2 * uplink + 2 * selection.len(),
                downlink: selection.len(),
                min_contribution: Some(selection.min_contribution()),
                selection: Some(selection),
                reports: Some(reports),
            })
        }
    }
}

/// `Σ_i C_i v_i / C`, summed in client order.
pub fn weighted_average<'a, I>(vectors: I, counts: &[usize]) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let total: usize = counts.iter().sum();
    let mut out: Vec<f64> = Vec::new();
    for (v, &c) in vectors.into_iter().zip(counts) {
        if out.is_empty() {
            out = vec![0.0; v.len()];
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += c as f64 * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total as f64);
    out
}
