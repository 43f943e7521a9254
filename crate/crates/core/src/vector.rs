//! Dense and sparse vectors over the flat weight space.
//!
//! Everything in the simulator lives in the same `D`-dimensional space: the
//! model weights, per-client gradients, the residual accumulators and the
//! sparse gradients exchanged between clients and the server.

use std::cmp::Ordering;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// A fixed-length vector of finite reals.
///
/// The length is fixed at construction; `DerefMut` only hands out a slice so
/// entries can be updated in place but the vector can never be resized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim])
    }

    /// Wraps `values`, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!("non-finite entry at index {j}")));
        }
        Ok(DenseVector(values))
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += scale * other` for another dense vector of the same length.
    pub fn add_scaled(&mut self, other: &[f64], scale: f64) -> Result<()> {
        if other.len() != self.0.len() {
            return Err(contract(format!(
                "dimension mismatch: {} vs {}",
                self.0.len(),
                other.len()
            )));
        }
        for (w, o) in self.0.iter_mut().zip(other) {
            *w += scale * o;
        }
        Ok(())
    }

    /// True when both vectors have identical bit patterns in every entry.
    pub fn bit_eq(&self, other: &DenseVector) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A sparse vector in index-value form with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGradient {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseGradient {
    pub fn empty(dim: usize) -> Self {
        SparseGradient {
            dim,
            entries: Vec::new(),
        }
    }

    /// Builds a sparse vector from entries already sorted by index.
    pub fn new(dim: usize, entries: Vec<(usize, f64)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(contract(format!(
                    "sparse indices must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(j, _)) = entries.last() {
            if j >= dim {
                return Err(contract(format!("index {j} out of range for dimension {dim}")));
            }
        }
        Ok(SparseGradient { dim, entries })
    }

    /// Builds a sparse vector from entries in arbitrary order.
    pub fn from_unsorted(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        Self::new(dim, entries)
    }

    /// Gathers `values[j]` for every `j` in `indices`.
    pub fn gather(values: &[f64], indices: &[usize]) -> Result<Self> {
        let entries = indices
            .iter()
            .map(|&j| {
                values
                    .get(j)
                    .map(|&v| (j, v))
                    .ok_or_else(|| contract(format!("index {j} out of range for dimension {}", values.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_unsorted(values.len(), entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Value stored at `index`, if any.
    pub fn get(&self, index: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .ok()
            .map(|p| self.entries[p].1)
    }

    /// Entries ordered by decreasing magnitude, ties by increasing index.
    ///
    /// This is the same order `top_k_indices` produces, so the first `κ`
    /// entries are exactly the reporter's top-`κ` elements.
    pub fn ranked(&self) -> Vec<(usize, f64)> {
        let mut out = self.entries.clone();
        out.sort_by(|a, b| rank_cmp(a.1, a.0, b.1, b.0));
        out
    }

    /// Keeps only the `k` highest-ranked entries.
    pub fn truncate_top(&self, k: usize) -> SparseGradient {
        if k >= self.entries.len() {
            return self.clone();
        }
        let mut top = self.ranked();
        top.truncate(k);
        top.sort_by_key(|e| e.0);
        SparseGradient {
            dim: self.dim,
            entries: top,
        }
    }

    pub fn to_dense(&self) -> DenseVector {
        let mut out = vec![0.0; self.dim];
        for &(j, v) in &self.entries {
            out[j] = v;
        }
        DenseVector(out)
    }
}

/// Orders by decreasing `|value|`, breaking ties by increasing index.
#[inline]
pub(crate) fn rank_cmp(va: f64, ia: usize, vb: f64, ib: usize) -> Ordering {
    vb.abs().total_cmp(&va.abs()).then(ia.cmp(&ib))
}

/// Indices of the `k` entries of largest magnitude, in rank order.
///
/// Ties on `|v_j|` go to the lower index, so the result is deterministic and
/// `top_k_indices(v, k)` is always a prefix of `top_k_indices(v, k + 1)`.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(contract(format!("k = {k} outside [1, {}]", v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let cmp = |a: &usize, b: &usize| rank_cmp(v[*a], *a, v[*b], *b);
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

/// Returns `w + scale * s`.
pub fn dense_axpy(w: &DenseVector, s: &SparseGradient, scale: f64) -> Result<DenseVector> {
    let mut out = w.clone();
    sparse_axpy_in_place(&mut out, s, scale)?;
    Ok(out)
}

/// `w += scale * s` in place.
pub fn sparse_axpy_in_place(w: &mut [f64], s: &SparseGradient, scale: f64) -> Result<()> {
    if s.dim() != w.len() {
        return Err(contract(format!(
            "sparse dimension {} does not match dense dimension {}",
            s.dim(),
            w.len()
        )));
    }
    for &(j, v) in s.entries() {
        w[j] += scale * v;
    }
    Ok(())
}

/// Densifies a sparse gradient.
pub fn sparse_to_dense(s: &SparseGradient) -> DenseVector {
    s.to_dense()
}
