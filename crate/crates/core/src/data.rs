//! Synthetic datasets, non-i.i.d. partitioning and CSV ingestion.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::rng::{self, SimRng, Stream};

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Standard deviation of the isotropic noise around each mean.
    pub noise: f64,
    /// Number of nonzero coordinates per class mean; `None` means dense.
    pub support: Option<usize>,
}

impl SynthSpec {
    pub fn new(num_classes: usize, dim: usize, samples_per_class: usize) -> Self {
        SynthSpec {
            num_classes,
            dim,
            samples_per_class,
            separation: 4.0,
            noise: 1.0,
            support: None,
        }
    }

    /// Class means, deterministic in `seed`.
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(seed, Stream::Data, &[0]);
        (0..self.num_classes)
            .map(|_| {
                let mut mean = vec![0.0; self.dim];
                match self.support {
                    Some(s) if s < self.dim => {
                        let mut coords: Vec<usize> = (0..self.dim).collect();
                        coords.shuffle(&mut rng);
                        for &j in &coords[..s.max(1)] {
                            mean[j] = StandardNormal.sample(&mut rng);
                        }
                    }
                    _ => mean
                        .iter_mut()
                        .for_each(|m| *m = StandardNormal.sample(&mut rng)),
                }
                let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                mean.iter_mut().for_each(|m| *m *= self.separation / norm);
                mean
            })
            .collect()
    }

    /// Draws `samples_per_class` samples per class, class-major order.
    ///
    /// `draw` selects an independent sample stream over the same class
    /// means, which is how held-out sets are produced.
    pub fn generate(&self, seed: u64, draw: u64) -> Result<Vec<Sample>> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Dataset("synthetic dataset counts must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Dataset("invalid noise or separation".into()));
        }
        let means = self.class_means(seed);
        let mut rng = rng::stream(seed, Stream::Data, &[1, draw]);
        let mut out = Vec::with_capacity(self.num_classes * self.samples_per_class);
        for (label, mean) in means.iter().enumerate() {
            for _ in 0..self.samples_per_class {
                let features = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + self.noise * z
                    })
                    .collect();
                out.push(Sample { features, label });
            }
        }
        Ok(out)
    }
}

/// Gaussian class clusters with default separation and unit noise.
pub fn synth_classification(
    seed: u64,
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
) -> Result<Vec<Sample>> {
    SynthSpec::new(num_classes, dim, samples_per_class).generate(seed, 0)
}

/// Samples split across `N` clients.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    shards: Vec<Vec<Sample>>,
    client_ids: Vec<String>,
}

impl FederatedDataset {
    pub fn new(shards: Vec<Vec<Sample>>, client_ids: Vec<String>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Dataset("a federated dataset needs at least one client".into()));
        }
        if shards.len() != client_ids.len() {
            return Err(Error::Dataset("one client id per shard required".into()));
        }
        if let Some(i) = shards.iter().position(Vec::is_empty) {
            return Err(Error::Dataset(format!("client {} has no samples", client_ids[i])));
        }
        Ok(FederatedDataset { shards, client_ids })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[Vec<Sample>] {
        &self.shards
    }

    pub fn into_shards(self) -> Vec<Vec<Sample>> {
        self.shards
    }

    pub fn client_ids(&self) -> &[String] {
        &self.client_ids
    }

    /// `C_i` for each client.
    pub fn counts(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// `C = Σ C_i`.
    pub fn total(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.shards[0][0].features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.shards
            .iter()
            .flatten()
            .map(|s| s.label + 1)
            .max()
            .unwrap_or(0)
    }

    /// Fraction of clients whose shard holds two or more distinct labels.
    pub fn label_skew(&self) -> f64 {
        let mixed = self
            .shards
            .iter()
            .filter(|shard| shard.iter().any(|s| s.label != shard[0].label))
            .count();
        mixed as f64 / self.shards.len() as f64
    }
}

/// Gives each client samples of a single class.
///
/// Clients are spread over classes as evenly as possible (class `c` gets
/// `⌊N/c⌋` or `⌈N/c⌉` clients) through a seeded permutation, and each class's
/// samples are shuffled and split evenly among the clients holding it.
pub fn partition_one_class_per_client(
    samples: Vec<Sample>,
    num_clients: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    if num_clients == 0 {
        return Err(Error::Dataset("need at least one client".into()));
    }
    if num_clients > samples.len() {
        return Err(Error::Dataset(format!(
            "{num_clients} clients but only {} samples",
            samples.len()
        )));
    }
    let mut by_class: Vec<(usize, Vec<Sample>)> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for s in samples {
        let p = *slot.entry(s.label).or_insert_with(|| {
            by_class.push((s.label, Vec::new()));
            by_class.len() - 1
        });
        by_class[p].1.push(s);
    }
    by_class.sort_by_key(|c| c.0);
    let classes = by_class.len();
    if num_clients < classes {
        return Err(Error::Dataset(format!(
            "{num_clients} clients cannot cover {classes} classes one class each"
        )));
    }

    let mut rng = rng::stream(seed, Stream::Partition, &[]);
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);
    // assignment[i] = class position held by client i
    let mut assignment: Vec<usize> = (0..num_clients).map(|j| class_order[j % classes]).collect();
    assignment.shuffle(&mut rng);

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (client, &c) in assignment.iter().enumerate() {
        holders[c].push(client);
    }
    let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); num_clients];
    for (c, (label, mut pool)) in by_class.into_iter().enumerate() {
        let owners = &holders[c];
        if pool.len() < owners.len() {
            return Err(Error::Dataset(format!(
                "class {label} has {} samples for {} clients",
                pool.len(),
                owners.len()
            )));
        }
        pool.shuffle(&mut rng);
        let base = pool.len() / owners.len();
        let extra = pool.len() % owners.len();
        let mut it = pool.into_iter();
        for (r, &client) in owners.iter().enumerate() {
            let take = base + usize::from(r < extra);
            shards[client].extend(it.by_ref().take(take));
        }
    }
    let ids = (0..num_clients).map(|i| i.to_string()).collect();
    FederatedDataset::new(shards, ids)
}

/// Reads a CSV with header `client_id,label,f0,...,f{d-1}`; one shard per
/// distinct `client_id` in order of first appearance, row order preserved.
pub fn partition_by_writer_csv(path: impl AsRef<Path>) -> Result<FederatedDataset> {
    let path = path.as_ref();
    let data_err = |line: u64, message: String| Error::Data {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "client_id" || &header[1] != "label" {
        return Err(data_err(
            1,
            "header must be client_id,label,f0,...,f{d-1}".into(),
        ));
    }
    for (i, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{i}") {
            return Err(data_err(1, format!("expected column f{i}, found {name:?}")));
        }
    }
    let dim = header.len() - 2;

    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut shards: Vec<Vec<Sample>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| {
            let line = e.position().map_or(line, |p| p.line());
            data_err(line, e.to_string())
        })?;
        if record.len() != dim + 2 {
            return Err(data_err(
                line,
                format!("expected {} fields, found {}", dim + 2, record.len()),
            ));
        }
        let label: usize = record[1]
            .parse()
            .map_err(|_| data_err(line, format!("invalid label {:?}", &record[1])))?;
        let features = record
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| data_err(line, format!("invalid feature {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let id = record[0].to_string();
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            shards.push(Vec::new());
            shards.len() - 1
        });
        shards[slot].push(Sample { features, label });
    }
    if shards.is_empty() {
        return Err(data_err(1, "no data rows".into()));
    }
    FederatedDataset::new(shards, ids)
}

/// Writes a federated dataset in the format read by [`partition_by_writer_csv`].
pub fn write_writer_csv(dataset: &FederatedDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = dataset.feature_dim();
    let mut header = vec!["client_id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (id, shard) in dataset.client_ids().iter().zip(dataset.shards()) {
        for s in shard {
            let mut rec = vec![id.clone(), s.label.to_string()];
            rec.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Stratified split of `samples` into (train, held-out).
pub fn split_holdout(
    samples: Vec<Sample>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Dataset(format!(
            "holdout fraction {holdout_fraction} not in [0, 1)"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Data, &[2]);
    let mut by_class: Vec<Vec<Sample>> = Vec::new();
    for s in samples {
        if by_class.len() <= s.label {
            by_class.resize_with(s.label + 1, Vec::new);
        }
        by_class[s.label].push(s);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut class in by_class {
        class.shuffle(&mut rng);
        let n_test = ((class.len() as f64) * holdout_fraction).floor() as usize;
        let n_test = n_test.min(class.len().saturating_sub(1));
        test.extend(class.drain(..n_test));
        train.extend(class);
    }
    Ok((train, test))
}

/// Uniform sampling with replacement of `size` indices into a shard.
pub fn sample_minibatch(shard_len: usize, size: usize, rng: &mut SimRng) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..shard_len)).collect()
}
