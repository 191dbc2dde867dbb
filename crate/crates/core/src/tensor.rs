//! Dense, sparse and Kruskal tensors plus the multilinear kernels shared by
//! the losses and estimators.
//!
//! Linear indices follow row-major order with the last mode varying fastest.
//! All in-memory indices are 0-based.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Entries processed per parallel work item. Partial sums are reduced in
/// chunk order, so results are bitwise reproducible for a fixed value.
pub(crate) const CHUNK: usize = 4096;

/// Default cap on the number of entries [`kruskal_to_dense`] will allocate.
pub const DEFAULT_DENSE_CAP: usize = 100_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::contract("shape must have at least one mode"));
        }
        if dims.contains(&0) {
            return Err(Error::contract(format!("every extent must be >= 1, got {dims:?}")));
        }
        let mut total = 1usize;
        for &d in &dims {
            total = total
                .checked_mul(d)
                .ok_or_else(|| Error::contract(format!("element count of {dims:?} overflows")))?;
        }
        let mut strides = vec![1usize; dims.len()];
        for n in (0..dims.len() - 1).rev() {
            strides[n] = strides[n + 1] * dims[n + 1];
        }
        Ok(Shape {
            dims,
            strides,
            total,
        })
    }

    /// A cubic shape `I × I × ⋯ × I` of the given order.
    pub fn cubic(order: usize, extent: usize) -> Result<Self> {
        Shape::new(vec![extent; order])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// Product of the extents.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Sum of the extents.
    pub fn sum_dims(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn contains(&self, idx: &[usize]) -> bool {
        idx.len() == self.dims.len() && idx.iter().zip(&self.dims).all(|(&i, &d)| i < d)
    }

    pub fn linearize(&self, idx: &[usize]) -> Result<usize> {
        if !self.contains(idx) {
            return Err(Error::Index {
                index: idx.to_vec(),
                dims: self.dims.clone(),
            });
        }
        Ok(idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum())
    }

    pub fn delinearize(&self, linear: usize) -> Result<Vec<usize>> {
        if linear >= self.total {
            return Err(Error::Index {
                index: vec![linear],
                dims: self.dims.clone(),
            });
        }
        let mut out = vec![0; self.order()];
        self.delinearize_into(linear, &mut out);
        Ok(out)
    }

    /// Unchecked variant writing into a caller buffer of length `order()`.
    pub fn delinearize_into(&self, mut linear: usize, out: &mut [usize]) {
        for (o, s) in out.iter_mut().zip(&self.strides) {
            *o = linear / s;
            linear %= s;
        }
    }

    /// Packs linear indices into a flat `u32` coordinate table, `order()`
    /// values per entry.
    pub(crate) fn coords_of(&self, linear: &[usize]) -> Vec<u32> {
        let n = self.order();
        let mut out = vec![0u32; linear.len() * n];
        let mut buf = vec![0usize; n];
        for (k, &lin) in linear.iter().enumerate() {
            self.delinearize_into(lin, &mut buf);
            for (o, &b) in out[k * n..(k + 1) * n].iter_mut().zip(&buf) {
                *o = b as u32;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.total() {
            return Err(Error::contract(format!(
                "dense tensor needs {} values, got {}",
                shape.total(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("dense tensor values must be finite"));
        }
        Ok(DenseTensor { shape, values })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.values[self.shape.linearize(idx)?])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sparse nonnegative integer tensor. Only strictly positive counts are
/// stored; absence means zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseCountTensor {
    shape: Shape,
    indices: Vec<usize>,
    counts: Vec<u64>,
}

impl SparseCountTensor {
    pub fn empty(shape: Shape) -> Self {
        SparseCountTensor {
            shape,
            indices: Vec::new(),
            counts: Vec::new(),
        }
    }

    /// Builds from `(multi-index, count)` pairs. Zero counts are dropped;
    /// repeated indices are rejected.
    pub fn from_entries(shape: Shape, entries: Vec<(Vec<usize>, u64)>) -> Result<Self> {
        let linear = entries
            .into_iter()
            .map(|(idx, c)| Ok((shape.linearize(&idx)?, c)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_linear(shape, linear)
    }

    pub fn from_linear(shape: Shape, mut entries: Vec<(usize, u64)>) -> Result<Self> {
        entries.retain(|&(_, c)| c > 0);
        entries.sort_unstable_by_key(|&(i, _)| i);
        if let Some(&(i, _)) = entries.iter().find(|&&(i, _)| i >= shape.total()) {
            return Err(Error::Index {
                index: vec![i],
                dims: shape.dims().to_vec(),
            });
        }
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            let idx = shape.delinearize(w[0].0)?;
            return Err(Error::contract(format!("duplicate entry at index {idx:?}")));
        }
        let (indices, counts) = entries.into_iter().unzip();
        Ok(SparseCountTensor {
            shape,
            indices,
            counts,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Sorted linear indices of the stored (nonzero) entries.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.indices.iter().copied().zip(self.counts.iter().copied())
    }

    /// Count at a linear index; zero when absent.
    pub fn get_linear(&self, linear: usize) -> u64 {
        match self.indices.binary_search(&linear) {
            Ok(k) => self.counts[k],
            Err(_) => 0,
        }
    }

    /// Mean of the stored counts, or `None` when there are none.
    pub fn mean_nonzero(&self) -> Option<f64> {
        if self.counts.is_empty() {
            None
        } else {
            Some(self.counts.iter().map(|&c| c as f64).sum::<f64>() / self.counts.len() as f64)
        }
    }
}

/// A strictly increasing set of linear indices into a shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSet {
    shape: Shape,
    indices: Vec<usize>,
}

impl ObservationSet {
    /// Sorts the given indices; duplicates and out-of-range values are errors.
    pub fn new(shape: Shape, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if let Some(&last) = indices.last() {
            if last >= shape.total() {
                return Err(Error::Index {
                    index: vec![last],
                    dims: shape.dims().to_vec(),
                });
            }
        }
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::contract(format!("duplicate linear index {}", w[0])));
        }
        Ok(ObservationSet { shape, indices })
    }

    pub fn from_multi_indices(shape: Shape, idx: &[Vec<usize>]) -> Result<Self> {
        let linear = idx
            .iter()
            .map(|i| shape.linearize(i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, linear)
    }

    pub fn empty(shape: Shape) -> Self {
        ObservationSet {
            shape,
            indices: Vec::new(),
        }
    }

    /// Materializes every index of the shape.
    pub fn full(shape: Shape) -> Self {
        let indices = (0..shape.total()).collect();
        ObservationSet { shape, indices }
    }

    pub(crate) fn from_sorted_unchecked(shape: Shape, indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        ObservationSet { shape, indices }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.shape.total()
    }

    pub fn contains(&self, linear: usize) -> bool {
        self.indices.binary_search(&linear).is_ok()
    }

    pub fn is_subset_of(&self, other: &ObservationSet) -> bool {
        self.shape == other.shape && self.indices.iter().all(|&i| other.contains(i))
    }

    /// Indices of the shape not in this set, in increasing order.
    pub fn complement(&self) -> ObservationSet {
        let mut out = Vec::with_capacity(self.shape.total() - self.indices.len());
        let mut next = 0usize;
        for &i in &self.indices {
            out.extend(next..i);
            next = i + 1;
        }
        out.extend(next..self.shape.total());
        ObservationSet::from_sorted_unchecked(self.shape.clone(), out)
    }
}

/// Real-valued sparse tensor in coordinate form, used as the weight tensor
/// of [`masked_mttkrp`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCoo {
    shape: Shape,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl WeightedCoo {
    pub fn new(shape: Shape, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_unstable_by_key(|&(i, _)| i);
        if let Some(&(i, _)) = entries.last() {
            if i >= shape.total() {
                return Err(Error::Index {
                    index: vec![i],
                    dims: shape.dims().to_vec(),
                });
            }
        }
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::contract("duplicate index in weight tensor"));
        }
        let (indices, values) = entries.into_iter().unzip();
        Ok(WeightedCoo {
            shape,
            indices,
            values,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// CP model `⟦λ; A⁽¹⁾, …, A⁽ᴺ⁾⟧`. Factor matrices are stored row-major and
/// concatenated mode after mode in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct KruskalModel {
    shape: Shape,
    rank: usize,
    weights: Vec<f64>,
    factors: Vec<f64>,
    offsets: Vec<usize>,
}

fn factor_offsets(shape: &Shape, rank: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(shape.order() + 1);
    let mut acc = 0;
    offsets.push(0);
    for &d in shape.dims() {
        acc += d * rank;
        offsets.push(acc);
    }
    offsets
}

impl KruskalModel {
    /// `factors[n]` is the `I_n × R` matrix of mode `n` in row-major order.
    pub fn new(shape: Shape, weights: Vec<f64>, factors: Vec<Vec<f64>>) -> Result<Self> {
        let rank = weights.len();
        if rank == 0 {
            return Err(Error::contract("rank must be >= 1"));
        }
        if factors.len() != shape.order() {
            return Err(Error::contract(format!(
                "expected {} factor matrices, got {}",
                shape.order(),
                factors.len()
            )));
        }
        for (n, (f, &d)) in factors.iter().zip(shape.dims()).enumerate() {
            if f.len() != d * rank {
                return Err(Error::contract(format!(
                    "factor {n} has {} values, expected {d}x{rank}",
                    f.len()
                )));
            }
        }
        if weights.iter().chain(factors.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::contract("model parameters must be finite"));
        }
        let offsets = factor_offsets(&shape, rank);
        Ok(KruskalModel {
            shape,
            rank,
            weights,
            factors: factors.concat(),
            offsets,
        })
    }

    /// Unit-weight model over the concatenated factor buffer used as the
    /// optimizer's variable vector.
    pub fn from_flat(shape: Shape, rank: usize, flat: Vec<f64>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::contract("rank must be >= 1"));
        }
        let offsets = factor_offsets(&shape, rank);
        if flat.len() != offsets[shape.order()] {
            return Err(Error::contract(format!(
                "flat factor buffer has {} values, expected {}",
                flat.len(),
                offsets[shape.order()]
            )));
        }
        Ok(KruskalModel {
            shape,
            rank,
            weights: vec![1.0; rank],
            factors: flat,
            offsets,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn factor(&self, mode: usize) -> &[f64] {
        &self.factors[self.offsets[mode]..self.offsets[mode + 1]]
    }

    pub fn factor_rows(&self, mode: usize) -> impl Iterator<Item = &[f64]> {
        self.factor(mode).chunks_exact(self.rank)
    }

    pub fn flat_factors(&self) -> &[f64] {
        &self.factors
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.rank {
            return Err(Error::contract("weight count must equal rank"));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Σ_r λ_r Π_n A⁽ⁿ⁾[i_n, r].
    pub fn entry(&self, idx: &[usize]) -> Result<f64> {
        if !self.shape.contains(idx) {
            return Err(Error::Index {
                index: idx.to_vec(),
                dims: self.shape.dims().to_vec(),
            });
        }
        Ok(self.entry_unchecked(idx.iter().copied()))
    }

    fn entry_unchecked(&self, idx: impl Iterator<Item = usize> + Clone) -> f64 {
        let r_count = self.rank;
        (0..r_count)
            .map(|r| {
                let mut p = self.weights[r];
                for (n, i) in idx.clone().enumerate() {
                    p *= self.factors[self.offsets[n] + i * r_count + r];
                }
                p
            })
            .sum()
    }

    /// Column sums of each factor, `[mode][r]`.
    pub(crate) fn column_sums(&self) -> Vec<Vec<f64>> {
        (0..self.shape.order())
            .map(|n| {
                let mut s = vec![0.0; self.rank];
                for row in self.factor_rows(n) {
                    for (acc, v) in s.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                s
            })
            .collect()
    }

    /// Sum of every reconstructed entry, Σ_r λ_r Π_n Σ_i A⁽ⁿ⁾[i, r].
    pub fn total_sum(&self) -> f64 {
        let sums = self.column_sums();
        (0..self.rank)
            .map(|r| self.weights[r] * sums.iter().map(|s| s[r]).product::<f64>())
            .sum()
    }

    /// Frobenius inner product of two reconstructions computed from factor
    /// Gram matrices.
    pub fn inner(&self, other: &KruskalModel) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape.dims(),
                other.shape.dims()
            )));
        }
        let (ra, rb) = (self.rank, other.rank);
        let mut prod = vec![1.0; ra * rb];
        for n in 0..self.shape.order() {
            let mut gram = vec![0.0; ra * rb];
            for (a, b) in self.factor_rows(n).zip(other.factor_rows(n)) {
                for r in 0..ra {
                    for s in 0..rb {
                        gram[r * rb + s] += a[r] * b[s];
                    }
                }
            }
            for (p, g) in prod.iter_mut().zip(&gram) {
                *p *= g;
            }
        }
        let mut acc = 0.0;
        for r in 0..ra {
            for s in 0..rb {
                acc += self.weights[r] * other.weights[s] * prod[r * rb + s];
            }
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).expect("same shape").max(0.0).sqrt()
    }

    /// Evaluates the model at every coordinate tuple of a packed table.
    pub(crate) fn eval_coords(&self, coords: &[u32], out: &mut [f64]) {
        let order = self.shape.order();
        debug_assert_eq!(coords.len(), out.len() * order);
        out.par_chunks_mut(CHUNK)
            .zip(coords.par_chunks(CHUNK * order))
            .for_each(|(o, c)| {
                for (v, idx) in o.iter_mut().zip(c.chunks_exact(order)) {
                    *v = self.entry_unchecked(idx.iter().map(|&i| i as usize));
                }
            });
    }

    /// Every entry of the reconstruction as an iterator in linear order,
    /// without allocating the dense tensor.
    pub(crate) fn for_each_entry(&self, mut f: impl FnMut(usize, f64)) {
        let mut buf = vec![0usize; self.shape.order()];
        for lin in 0..self.shape.total() {
            self.shape.delinearize_into(lin, &mut buf);
            f(lin, self.entry_unchecked(buf.iter().copied()));
        }
    }
}

/// Single-entry evaluation of a Kruskal model.
pub fn kruskal_entry(model: &KruskalModel, idx: &[usize]) -> Result<f64> {
    model.entry(idx)
}

/// Full reconstruction. Refuses to allocate more than `cap` entries
/// (default [`DEFAULT_DENSE_CAP`]).
pub fn kruskal_to_dense(model: &KruskalModel, cap: Option<usize>) -> Result<DenseTensor> {
    let cap = cap.unwrap_or(DEFAULT_DENSE_CAP);
    let total = model.shape().total();
    if total > cap {
        return Err(Error::Resource {
            requested: total,
            cap,
        });
    }
    let mut values = vec![0.0; total];
    model.for_each_entry(|lin, v| values[lin] = v);
    DenseTensor::new(model.shape().clone(), values)
}

/// Accumulates `Σ_e w_e Π_{k≠n} A⁽ᵏ⁾[i_k(e), r]` into row `i_n(e)` of a
/// per-mode buffer laid out like [`KruskalModel::flat_factors`], for every
/// mode at once. Weights λ are not applied.
pub(crate) fn mttkrp_all_modes(model: &KruskalModel, coords: &[u32], weights: &[f64]) -> Vec<f64> {
    let order = model.shape().order();
    let size = model.flat_factors().len();
    debug_assert_eq!(coords.len(), weights.len() * order);
    let partials: Vec<Vec<f64>> = coords
        .par_chunks(CHUNK * order)
        .zip(weights.par_chunks(CHUNK))
        .map(|(c, w)| {
            let mut out = vec![0.0; size];
            accumulate_mttkrp(model, c, w, &mut out);
            out
        })
        .collect();
    let mut total = vec![0.0; size];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn accumulate_mttkrp(model: &KruskalModel, coords: &[u32], weights: &[f64], out: &mut [f64]) {
    let order = model.shape().order();
    let rank = model.rank();
    let factors = model.flat_factors();
    let offsets = model.offsets();
    let mut base = vec![0usize; order];
    for (idx, &w) in coords.chunks_exact(order).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for n in 0..order {
            base[n] = offsets[n] + idx[n] as usize * rank;
        }
        for n in 0..order {
            for r in 0..rank {
                let mut p = w;
                for (k, &b) in base.iter().enumerate() {
                    if k != n {
                        p *= factors[b + r];
                    }
                }
                out[base[n] + r] += p;
            }
        }
    }
}

/// Matricized-tensor times Khatri-Rao product restricted to the support of a
/// sparse weight tensor. Returns the `I_n × R` result in row-major order.
pub fn masked_mttkrp(mode: usize, weights: &WeightedCoo, model: &KruskalModel) -> Result<Vec<f64>> {
    if weights.shape() != model.shape() {
        return Err(Error::contract("weight tensor and model shapes differ"));
    }
    if mode >= model.shape().order() {
        return Err(Error::contract(format!(
            "mode {mode} out of range for order {}",
            model.shape().order()
        )));
    }
    let coords = model.shape().coords_of(weights.indices());
    let all = mttkrp_all_modes(model, &coords, weights.values());
    let off = model.offsets();
    Ok(all[off[mode]..off[mode + 1]].to_vec())
}

/// Γ = Ω ∩ support(X).
pub fn restrict_to_nonzeros(x: &SparseCountTensor, omega: &ObservationSet) -> Result<ObservationSet> {
    if x.shape() != omega.shape() {
        return Err(Error::contract(format!(
            "count tensor shape {:?} differs from observation set shape {:?}",
            x.shape().dims(),
            omega.shape().dims()
        )));
    }
    let (a, b) = (x.indices(), omega.indices());
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    Ok(ObservationSet::from_sorted_unchecked(omega.shape().clone(), out))
}
