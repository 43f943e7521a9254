//! Small differentiable classifiers with hand-written backpropagation.
//!
//! Two architectures are supported, both trained with softmax cross-entropy:
//! multinomial logistic regression and a one-hidden-layer ReLU network.
//! Weights live in a single flat vector; the layout is
//!
//! * logistic: `W[c][i]` (row-major, `classes x input`) then `b[c]`
//! * mlp: `W1[h][i]`, `b1[h]`, `W2[c][h]`, `b2[c]`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::vector::DenseVector;

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Sample { features, label }
    }
}

/// Mean loss over a batch and the number of correctly classified samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl LossReport {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    input_dim: usize,
    hidden: Option<usize>,
    classes: usize,
}

impl Model {
    pub fn logistic(input_dim: usize, classes: usize) -> Result<Self> {
        Self::build(input_dim, None, classes)
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::build(input_dim, Some(hidden), classes)
    }

    fn build(input_dim: usize, hidden: Option<usize>, classes: usize) -> Result<Self> {
        if input_dim == 0 || classes < 2 || hidden == Some(0) {
            return Err(contract(format!(
                "invalid architecture: input {input_dim}, hidden {hidden:?}, classes {classes}"
            )));
        }
        Ok(Model {
            input_dim,
            hidden,
            classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> Option<usize> {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Total parameter count `D`.
    pub fn dim(&self) -> usize {
        match self.hidden {
            None => self.classes * (self.input_dim + 1),
            Some(h) => h * (self.input_dim + 1) + self.classes * (h + 1),
        }
    }

    /// Initial weights. Logistic regression starts at zero; the MLP uses a
    /// uniform Glorot initialisation for both weight matrices and zero biases.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> DenseVector {
        let mut w = vec![0.0; self.dim()];
        if let Some(h) = self.hidden {
            let (w1, rest) = w.split_at_mut(h * self.input_dim);
            let a1 = (6.0 / (self.input_dim + h) as f64).sqrt();
            w1.iter_mut().for_each(|x| *x = rng.random_range(-a1..a1));
            let w2 = &mut rest[h..h + self.classes * h];
            let a2 = (6.0 / (h + self.classes) as f64).sqrt();
            w2.iter_mut().for_each(|x| *x = rng.random_range(-a2..a2));
        }
        DenseVector::from_vec_unchecked(w)
    }

    fn check(&self, weights: &[f64], sample: &Sample) -> Result<()> {
        if weights.len() != self.dim() {
            return Err(contract(format!(
                "weight length {} does not match model dimension {}",
                weights.len(),
                self.dim()
            )));
        }
        if sample.features.len() != self.input_dim {
            return Err(contract(format!(
                "sample has {} features, model expects {}",
                sample.features.len(),
                self.input_dim
            )));
        }
        if sample.label >= self.classes {
            return Err(contract(format!(
                "label {} out of range for {} classes",
                sample.label, self.classes
            )));
        }
        Ok(())
    }

    /// Hidden-layer pre-activations for one sample (empty for logistic
    /// regression). Exposed so gradient checks can steer clear of ReLU kinks.
    pub fn hidden_preactivations(&self, weights: &[f64], sample: &Sample) -> Result<Vec<f64>> {
        self.check(weights, sample)?;
        Ok(match self.hidden {
            None => Vec::new(),
            Some(h) => {
                let (w1, b1) = (&weights[..h * self.input_dim], &weights[h * self.input_dim..]);
                affine(w1, &b1[..h], &sample.features, h)
            }
        })
    }

    /// Per-sample cross-entropy loss.
    pub fn sample_loss(&self, weights: &[f64], sample: &Sample) -> Result<f64> {
        self.check(weights, sample)?;
        Ok(self.forward(weights, sample).0)
    }

    /// Mean loss and correct count over `samples` without computing gradients.
    pub fn evaluate<'a, I>(&self, weights: &[f64], samples: I) -> Result<LossReport>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut loss = 0.0;
        let mut correct = 0;
        let mut count = 0;
        for s in samples {
            self.check(weights, s)?;
            let (l, hit) = self.forward(weights, s);
            loss += l;
            correct += usize::from(hit);
            count += 1;
        }
        if count == 0 {
            return Err(contract("cannot evaluate an empty sample set"));
        }
        Ok(LossReport {
            loss: loss / count as f64,
            correct,
            count,
        })
    }

    /// Gradient of the mean cross-entropy over `batch`, plus the loss report.
    pub fn minibatch_gradient(
        &self,
        weights: &[f64],
        batch: &[&Sample],
    ) -> Result<(DenseVector, LossReport)> {
        if batch.is_empty() {
            return Err(contract("minibatch must be nonempty"));
        }
        let mut grad = vec![0.0; self.dim()];
        let mut loss = 0.0;
        let mut correct = 0;
        for s in batch {
            self.check(weights, s)?;
            let (l, hit) = self.backward(weights, s, &mut grad);
            loss += l;
            correct += usize::from(hit);
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((
            DenseVector::from_vec_unchecked(grad),
            LossReport {
                loss: loss / n,
                correct,
                count: batch.len(),
            },
        ))
    }

    fn forward(&self, weights: &[f64], s: &Sample) -> (f64, bool) {
        let logits = match self.hidden {
            None => {
                let split = self.classes * self.input_dim;
                affine(&weights[..split], &weights[split..], &s.features, self.classes)
            }
            Some(h) => {
                let d = self.input_dim;
                let (w1, rest) = weights.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(self.classes * h);
                let mut z = affine(w1, b1, &s.features, h);
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                affine(w2, b2, &z, self.classes)
            }
        };
        let (lse, _) = log_softmax_parts(&logits);
        (lse - logits[s.label], argmax(&logits) == s.label)
    }

    /// Accumulates the per-sample gradient into `grad`, returns (loss, correct).
    fn backward(&self, weights: &[f64], s: &Sample, grad: &mut [f64]) -> (f64, bool) {
        let d = self.input_dim;
        let c = self.classes;
        let x = &s.features;
        match self.hidden {
            None => {
                let split = c * d;
                let logits = affine(&weights[..split], &weights[split..], x, c);
                let (lse, probs) = log_softmax_parts(&logits);
                let (gw, gb) = grad.split_at_mut(split);
                for k in 0..c {
                    let delta = probs[k] - f64::from(u8::from(k == s.label));
                    gb[k] += delta;
                    for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += delta * xi;
                    }
                }
                (lse - logits[s.label], argmax(&logits) == s.label)
            }
            Some(h) => {
                let (w1, rest) = weights.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let pre = affine(w1, b1, x, h);
                let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                let logits = affine(w2, b2, &act, c);
                let (lse, probs) = log_softmax_parts(&logits);

                let (gw1, grest) = grad.split_at_mut(h * d);
                let (gb1, grest) = grest.split_at_mut(h);
                let (gw2, gb2) = grest.split_at_mut(c * h);
                let mut dact = vec![0.0; h];
                for k in 0..c {
                    let delta = probs[k] - f64::from(u8::from(k == s.label));
                    gb2[k] += delta;
                    let row = &w2[k * h..(k + 1) * h];
                    for j in 0..h {
                        gw2[k * h + j] += delta * act[j];
                        dact[j] += delta * row[j];
                    }
                }
                for j in 0..h {
                    // subgradient of relu at 0 is taken as 0
                    if pre[j] <= 0.0 {
                        continue;
                    }
                    let dz = dact[j];
                    gb1[j] += dz;
                    for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                }
                (lse - logits[s.label], argmax(&logits) == s.label)
            }
        }
    }
}

/// `W x + b` with `W` row-major of shape `rows x x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let d = x.len();
    (0..rows)
        .map(|r| {
            w[r * d..(r + 1) * d]
                .iter()
                .zip(x)
                .fold(b[r], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect()
}

/// Returns `(log-sum-exp(z), softmax(z))`.
fn log_softmax_parts(z: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample(features: &[f64], label: usize) -> Sample {
        Sample::new(features.to_vec(), label)
    }

    #[test]
    fn dimensions() {
        assert_eq!(Model::logistic(4, 3).unwrap().dim(), 15);
        assert_eq!(Model::mlp(4, 5, 3).unwrap().dim(), 5 * 5 + 3 * 6);
        assert!(Model::logistic(4, 1).is_err());
        assert!(Model::mlp(4, 0, 3).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let m = Model::logistic(3, 10).unwrap();
        let w = vec![0.0; m.dim()];
        let x = sample(&[0.3, -1.0, 2.0], 4);
        let loss = m.sample_loss(&w, &x).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let (g, rep) = m.minibatch_gradient(&w, &[&x]).unwrap();
        assert!((rep.loss - 10f64.ln()).abs() < 1e-12);
        // bias gradient of uniform softmax: 1/10 - 1[k = label]
        for k in 0..10 {
            let expect = 0.1 - if k == 4 { 1.0 } else { 0.0 };
            assert!((g[30 + k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let m = Model::mlp(3, 4, 3).unwrap();
        let w = m.init_weights(&mut seeded(1));
        let x = sample(&[0.5, -0.2, 1.1], 2);
        let (g1, r1) = m.minibatch_gradient(&w, &[&x]).unwrap();
        let (g2, r2) = m.minibatch_gradient(&w, &[&x, &x]).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r1.loss - r2.loss).abs() < 1e-12);
    }

    #[test]
    fn loss_is_order_invariant() {
        let m = Model::logistic(2, 3).unwrap();
        let w = m.init_weights(&mut seeded(0));
        let a = sample(&[1.0, 2.0], 0);
        let b = sample(&[-1.0, 0.5], 2);
        let (ga, ra) = m.minibatch_gradient(&w, &[&a, &b]).unwrap();
        let (gb, rb) = m.minibatch_gradient(&w, &[&b, &a]).unwrap();
        assert!((ra.loss - rb.loss).abs() < 1e-12);
        assert!(ga.iter().zip(gb.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn sample_loss_matches_single_sample_batch() {
        let m = Model::mlp(3, 6, 4).unwrap();
        let w = m.init_weights(&mut seeded(5));
        let x = sample(&[0.1, 0.9, -0.4], 3);
        let (_, rep) = m.minibatch_gradient(&w, &[&x]).unwrap();
        assert_eq!(rep.loss, m.sample_loss(&w, &x).unwrap());
    }

    #[test]
    fn one_step_decreases_sample_loss() {
        for m in [Model::logistic(3, 4).unwrap(), Model::mlp(3, 8, 4).unwrap()] {
            let mut w = m.init_weights(&mut seeded(9));
            let x = sample(&[1.0, -0.5, 0.25], 1);
            let before = m.sample_loss(&w, &x).unwrap();
            let (g, _) = m.minibatch_gradient(&w, &[&x]).unwrap();
            w.add_scaled(&g, -0.01).unwrap();
            assert!(m.sample_loss(&w, &x).unwrap() < before);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = Model::logistic(3, 2).unwrap();
        let w = vec![0.0; m.dim()];
        assert!(m.sample_loss(&w, &sample(&[1.0], 0)).is_err());
        assert!(m.sample_loss(&w, &sample(&[1.0, 1.0, 1.0], 2)).is_err());
        assert!(m.sample_loss(&w[1..], &sample(&[1.0, 1.0, 1.0], 0)).is_err());
        assert!(m.minibatch_gradient(&w, &[]).is_err());
    }
}
