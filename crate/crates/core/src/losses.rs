//! Poisson and zero-truncated Poisson negative log-likelihoods, per entry and
//! aggregated over a mask of a Kruskal model.
//!
//! Reported values are full NLLs including the `log(x!)` constants. Every
//! logarithm argument and divisor carries the stabilization shift `eps`.

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::tensor::{KruskalModel, ObservationSet, Shape, SparseCountTensor, CHUNK};

/// Above this rate `log(eᵐ − 1)` is evaluated as `m + log1p(−e⁻ᵐ)`.
const LARGE_RATE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    Poisson,
    ZeroTruncatedPoisson,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StabilizationPolicy {
    eps: f64,
}

impl StabilizationPolicy {
    pub fn new(eps: f64) -> Result<Self> {
        if eps > 0.0 && eps.is_finite() {
            Ok(StabilizationPolicy { eps })
        } else {
            Err(Error::domain(format!("stabilization shift must be positive, got {eps}")))
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

impl Default for StabilizationPolicy {
    fn default() -> Self {
        StabilizationPolicy { eps: 1e-10 }
    }
}

pub fn ln_factorial(x: u64) -> f64 {
    if x < 2 {
        0.0
    } else {
        ln_gamma(x as f64 + 1.0)
    }
}

/// `log(eᵐ − 1 + eps)` without overflow for large `m`.
fn ln_expm1_shifted(m: f64, eps: f64) -> f64 {
    if m > LARGE_RATE {
        m + ((eps - 1.0) * (-m).exp()).ln_1p()
    } else {
        (m.exp_m1() + eps).ln()
    }
}

/// Derivative of [`ln_expm1_shifted`]: `eᵐ / (eᵐ − 1 + eps)`.
fn ln_expm1_shifted_deriv(m: f64, eps: f64) -> f64 {
    ln_expm1_shifted_with_deriv(m, eps).1
}

/// [`ln_expm1_shifted`] and its derivative from one exponential.
#[inline]
fn ln_expm1_shifted_with_deriv(m: f64, eps: f64) -> (f64, f64) {
    if m > LARGE_RATE {
        let t = (eps - 1.0) * (-m).exp();
        (m + t.ln_1p(), 1.0 / (1.0 + t))
    } else {
        let em1 = m.exp_m1();
        let d = em1 + eps;
        (d.ln(), (em1 + 1.0) / d)
    }
}

#[inline]
fn poisson_term(m: f64, x: f64, eps: f64) -> f64 {
    m - x * (m + eps).ln()
}

#[inline]
fn ztp_term(m: f64, x: f64, eps: f64) -> f64 {
    ln_expm1_shifted(m, eps) - x * (m + eps).ln()
}

/// `−[x log(m + eps) − m − log x!]`.
pub fn poisson_nll_entry(m: f64, x: u64, policy: StabilizationPolicy) -> f64 {
    poisson_term(m, x as f64, policy.eps) + ln_factorial(x)
}

/// `1 − x / (m + eps)`.
pub fn poisson_nll_grad_entry(m: f64, x: u64, policy: StabilizationPolicy) -> f64 {
    1.0 - x as f64 / (m + policy.eps)
}

fn require_positive(x: u64) -> Result<()> {
    if x == 0 {
        Err(Error::contract("zero count passed to the zero-truncated loss"))
    } else {
        Ok(())
    }
}

/// `−[x log(m + eps) − log(eᵐ − 1 + eps) − log x!]` for `x ≥ 1`.
pub fn ztp_nll_entry(m: f64, x: u64, policy: StabilizationPolicy) -> Result<f64> {
    require_positive(x)?;
    Ok(ztp_term(m, x as f64, policy.eps) + ln_factorial(x))
}

/// Derivative of [`ztp_nll_entry`] in `m`, evaluated as
/// `1 / (1 − e⁻ᵐ + eps·e⁻ᵐ) − x / (m + eps)`.
pub fn ztp_nll_grad_entry(m: f64, x: u64, policy: StabilizationPolicy) -> Result<f64> {
    require_positive(x)?;
    Ok(ln_expm1_shifted_deriv(m, policy.eps) - x as f64 / (m + policy.eps))
}

/// Which entries an objective sums over. `Full` stands for every index of
/// the shape without materializing them.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    Full(Shape),
    Indices(ObservationSet),
}

impl Mask {
    pub fn shape(&self) -> &Shape {
        match self {
            Mask::Full(s) => s,
            Mask::Indices(o) => o.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Mask::Full(s) => s.total(),
            Mask::Indices(o) => o.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        match self {
            Mask::Full(_) => true,
            Mask::Indices(o) => o.is_full(),
        }
    }
}

/// A masked objective prepared for repeated evaluation on models of one
/// shape.
///
/// For the Poisson loss the sum of `m` over the mask is split as
/// `Σ_all m − Σ_{not mask} m` whenever that touches fewer entries than the
/// mask itself; `Σ_all m` has a closed form on Kruskal models. A full mask
/// therefore costs one pass over the nonzero counts only.
#[derive(Debug, Clone)]
pub struct ObjectivePlan {
    shape: Shape,
    kind: LossKind,
    eps: f64,
    include_total: bool,
    coords: Vec<u32>,
    counts: Vec<f64>,
    /// Multiplier of `m` for entries with a positive / zero count (Poisson
    /// only): 1 / 1 when summing over the mask directly, 0 / −1 when the
    /// closed-form total is included.
    linear_coef: (f64, f64),
    constant: f64,
    mask_len: usize,
}

impl ObjectivePlan {
    pub fn new(
        x: &SparseCountTensor,
        mask: &Mask,
        kind: LossKind,
        policy: StabilizationPolicy,
    ) -> Result<Self> {
        let shape = mask.shape().clone();
        if x.shape() != &shape {
            return Err(Error::contract(format!(
                "count tensor shape {:?} differs from mask shape {:?}",
                x.shape().dims(),
                shape.dims()
            )));
        }
        let mut include_total = false;
        let mut linear_idx: Vec<usize> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut linear_coef = (1.0, 1.0);

        match kind {
            LossKind::Poisson => {
                let support = |o: &ObservationSet| -> Vec<(usize, u64)> {
                    let mut v = Vec::new();
                    let (a, b) = (x.indices(), o.indices());
                    let (mut i, mut j) = (0, 0);
                    while i < a.len() && j < b.len() {
                        match a[i].cmp(&b[j]) {
                            std::cmp::Ordering::Less => i += 1,
                            std::cmp::Ordering::Greater => j += 1,
                            std::cmp::Ordering::Equal => {
                                v.push((a[i], x.counts()[i]));
                                i += 1;
                                j += 1;
                            }
                        }
                    }
                    v
                };
                match mask {
                    Mask::Full(_) => {
                        include_total = true;
                        for (i, c) in x.iter() {
                            linear_idx.push(i);
                            counts.push(c as f64);
                        }
                        linear_coef = (0.0, -1.0);
                    }
                    Mask::Indices(o) => {
                        let gamma = support(o);
                        let via_complement = gamma.len() + (shape.total() - o.len());
                        if o.is_full() || via_complement < o.len() {
                            include_total = true;
                            for (i, c) in gamma {
                                linear_idx.push(i);
                                counts.push(c as f64);
                            }
                            for i in o.complement().indices() {
                                linear_idx.push(*i);
                                counts.push(0.0);
                            }
                            linear_coef = (0.0, -1.0);
                        } else {
                            let mut g = gamma.into_iter().peekable();
                            for &i in o.indices() {
                                let c = match g.peek() {
                                    Some(&(j, c)) if j == i => {
                                        g.next();
                                        c
                                    }
                                    _ => 0,
                                };
                                linear_idx.push(i);
                                counts.push(c as f64);
                            }
                        }
                    }
                }
            }
            LossKind::ZeroTruncatedPoisson => {
                let idx: Vec<usize> = match mask {
                    Mask::Full(s) => (0..s.total()).collect(),
                    Mask::Indices(o) => o.indices().to_vec(),
                };
                for i in idx {
                    let c = x.get_linear(i);
                    if c == 0 {
                        return Err(Error::contract(format!(
                            "zero-truncated mask contains zero-count index {:?}",
                            shape.delinearize(i)?
                        )));
                    }
                    linear_idx.push(i);
                    counts.push(c as f64);
                }
            }
        }

        let constant = counts.iter().map(|&c| ln_factorial(c as u64)).sum();
        Ok(ObjectivePlan {
            coords: shape.coords_of(&linear_idx),
            shape,
            kind,
            eps: policy.eps,
            include_total,
            counts,
            linear_coef,
            constant,
            mask_len: mask.len(),
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn mask_len(&self) -> usize {
        self.mask_len
    }

    fn check(&self, model: &KruskalModel) -> Result<()> {
        if model.shape() != &self.shape {
            return Err(Error::contract(format!(
                "model shape {:?} differs from objective shape {:?}",
                model.shape().dims(),
                self.shape.dims()
            )));
        }
        Ok(())
    }

    /// One pass over the planned entries: evaluates the model, sums the loss
    /// terms and, when `grad` is set, accumulates the gradient. Chunks are
    /// reduced in index order so the result does not depend on scheduling.
    fn accumulate(&self, model: &KruskalModel, with_grad: bool) -> (f64, Vec<f64>) {
        let order = self.shape.order();
        let size = if with_grad { model.flat_factors().len() } else { 0 };
        let partials: Vec<(f64, Vec<f64>)> = self
            .coords
            .par_chunks(CHUNK * order)
            .enumerate()
            .map(|(c, coords)| {
                let lo = c * CHUNK;
                let hi = lo + coords.len() / order;
                let mut grad = vec![0.0; size];
                let f = self.chunk(model, coords, &self.counts[lo..hi], with_grad.then_some(&mut grad[..]));
                (f, grad)
            })
            .collect();
        let mut f = 0.0;
        let mut grad = vec![0.0; size];
        for (pf, pg) in &partials {
            f += pf;
            for (t, v) in grad.iter_mut().zip(pg) {
                *t += v;
            }
        }
        (f, grad)
    }

    fn chunk(
        &self,
        model: &KruskalModel,
        coords: &[u32],
        counts: &[f64],
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let eps = self.eps;
        let (pos, zero) = self.linear_coef;
        match (self.kind, grad) {
            (LossKind::Poisson, None) => chunk_kernel(model, coords, |e, m| {
                let x = counts[e];
                (if x == 0.0 { zero * m } else { pos * m - x * (m + eps).ln() }, 0.0)
            }, None),
            (LossKind::Poisson, g) => chunk_kernel(model, coords, |e, m| {
                let x = counts[e];
                if x == 0.0 {
                    (zero * m, zero)
                } else {
                    let s = m + eps;
                    (pos * m - x * s.ln(), pos - x / s)
                }
            }, g),
            (LossKind::ZeroTruncatedPoisson, None) => {
                chunk_kernel(model, coords, |e, m| (ztp_term(m, counts[e], eps), 0.0), None)
            }
            (LossKind::ZeroTruncatedPoisson, g) => chunk_kernel(model, coords, |e, m| {
                let x = counts[e];
                let (ln_norm, d_norm) = ln_expm1_shifted_with_deriv(m, eps);
                let s = m + eps;
                (ln_norm - x * s.ln(), d_norm - x / s)
            }, g),
        }
    }

    pub fn value(&self, model: &KruskalModel) -> Result<f64> {
        self.check(model)?;
        let (mut f, _) = self.accumulate(model, false);
        if self.include_total {
            f += model.total_sum();
        }
        Ok(f + self.constant)
    }

    /// Objective and its gradient with respect to the factor matrices (λ
    /// held fixed), laid out like [`KruskalModel::flat_factors`].
    pub fn value_and_gradient(&self, model: &KruskalModel) -> Result<(f64, Vec<f64>)> {
        self.check(model)?;
        let (mut f, mut grad) = self.accumulate(model, true);
        let rank = model.rank();
        let lambda = model.weights();
        if self.include_total {
            f += model.total_sum();
            let sums = model.column_sums();
            let offsets = model.offsets();
            for n in 0..self.shape.order() {
                let coef: Vec<f64> = (0..rank)
                    .map(|r| {
                        lambda[r]
                            * sums
                                .iter()
                                .enumerate()
                                .filter(|&(k, _)| k != n)
                                .map(|(_, s)| s[r])
                                .product::<f64>()
                    })
                    .collect();
                for row in grad[offsets[n]..offsets[n + 1]].chunks_exact_mut(rank) {
                    for (g, c) in row.iter_mut().zip(&coef) {
                        *g += c;
                    }
                }
            }
        }
        Ok((f + self.constant, grad))
    }
}

/// Evaluates the model at each packed coordinate tuple, feeds `(entry, m)`
/// to `loss`, which returns the term and its derivative in `m`, and
/// accumulates `Σ term` plus, with `grad`, the chain-rule gradient.
#[inline(always)]
fn chunk_kernel<L>(model: &KruskalModel, coords: &[u32], loss: L, mut grad: Option<&mut [f64]>) -> f64
where
    L: Fn(usize, f64) -> (f64, f64),
{
    let order = model.shape().order();
    let rank = model.rank();
    let factors = model.flat_factors();
    let offsets = model.offsets();
    let lambda = model.weights();
    // prefix[n·R + r] = λ_r Π_{k<n} A⁽ᵏ⁾[i_k, r]
    let mut prefix = vec![0.0; (order + 1) * rank];
    prefix[..rank].copy_from_slice(lambda);
    let mut suffix = vec![0.0; rank];
    let mut base = vec![0usize; order];
    let mut f = 0.0;
    for (e, idx) in coords.chunks_exact(order).enumerate() {
        for n in 0..order {
            let b = offsets[n] + idx[n] as usize * rank;
            base[n] = b;
            let row = &factors[b..b + rank];
            let (done, next) = prefix.split_at_mut((n + 1) * rank);
            for ((p, q), a) in next[..rank].iter_mut().zip(&done[n * rank..]).zip(row) {
                *p = q * a;
            }
        }
        let m: f64 = prefix[order * rank..].iter().sum();
        let (term, w) = loss(e, m);
        f += term;
        let Some(g) = grad.as_deref_mut() else { continue };
        if w == 0.0 {
            continue;
        }
        suffix.fill(w);
        for n in (0..order).rev() {
            let b = base[n];
            let pre = &prefix[n * rank..(n + 1) * rank];
            for ((gv, p), s) in g[b..b + rank].iter_mut().zip(pre).zip(&suffix) {
                *gv += p * s;
            }
            for (s, a) in suffix.iter_mut().zip(&factors[b..b + rank]) {
                *s *= a;
            }
        }
    }
    f
}

/// Sum of per-entry NLLs over `mask`. Mask entries absent from `x` count as
/// zeros (Poisson only; the zero-truncated loss rejects them).
pub fn masked_objective(
    model: &KruskalModel,
    x: &SparseCountTensor,
    mask: &Mask,
    kind: LossKind,
    policy: StabilizationPolicy,
) -> Result<f64> {
    ObjectivePlan::new(x, mask, kind, policy)?.value(model)
}

/// Per-mode gradients of [`masked_objective`]; element `n` is an `I_n × R`
/// row-major matrix.
pub fn masked_objective_grad(
    model: &KruskalModel,
    x: &SparseCountTensor,
    mask: &Mask,
    kind: LossKind,
    policy: StabilizationPolicy,
) -> Result<Vec<Vec<f64>>> {
    let (_, flat) = ObjectivePlan::new(x, mask, kind, policy)?.value_and_gradient(model)?;
    let off = model.offsets();
    Ok((0..model.shape().order())
        .map(|n| flat[off[n]..off[n + 1]].to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: StabilizationPolicy = StabilizationPolicy { eps: 1e-10 };

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn poisson_entry_values() {
        assert!(close(poisson_nll_entry(1.0, 2, P), 1.0 + 2f64.ln(), 1e-9));
        assert!(close(poisson_nll_entry(1.0, 0, P), 1.0, 1e-12));
        let expect = -(3.0 * 2.5f64.ln() - 2.5 - 6f64.ln());
        assert!(close(poisson_nll_entry(2.5, 3, P), expect, 1e-9));
        assert!(close(expect, 1.542887, 1e-6));
    }

    #[test]
    fn poisson_gradient_values() {
        assert!(poisson_nll_grad_entry(1.0, 1, P).abs() <= 1e-9);
        assert_eq!(poisson_nll_grad_entry(0.3, 0, P), 1.0);
        assert!(close(poisson_nll_grad_entry(2.0, 4, P), -1.0, 1e-9));
    }

    #[test]
    fn ztp_entry_values() {
        let e = std::f64::consts::E;
        assert!(close(ztp_nll_entry(1.0, 1, P).unwrap(), (e - 1.0).ln(), 1e-9));
        assert!(close(ztp_nll_entry(1.0, 1, P).unwrap(), 0.541324, 1e-6));
        assert!(close(ztp_nll_entry(1.0, 2, P).unwrap(), 1.234472, 1e-6));
        let big = ztp_nll_entry(50.0, 1, P).unwrap();
        assert!(close(big, 50.0 - 50f64.ln(), 1e-9));
        assert!(close(big, 46.087976, 1e-6));
    }

    #[test]
    fn ztp_rejects_zero_counts() {
        assert!(matches!(ztp_nll_entry(1.0, 0, P), Err(Error::Contract(_))));
        assert!(matches!(ztp_nll_grad_entry(1.0, 0, P), Err(Error::Contract(_))));
    }

    #[test]
    fn ztp_gradient_values() {
        let g = ztp_nll_grad_entry(1.0, 1, P).unwrap();
        assert!(close(g, 1.0 / (1.0 - (-1f64).exp()) - 1.0, 1e-9));
        assert!(close(g, 0.581977, 1e-6));
        for m in [30.0, 45.0, 80.0] {
            let g = ztp_nll_grad_entry(m, 1, P).unwrap();
            assert!(close(g, 1.0 - 1.0 / m, 1e-9));
        }
        let (m, h) = (2.2, 1e-6);
        let fd = (ztp_nll_entry(m + h, 3, P).unwrap() - ztp_nll_entry(m - h, 3, P).unwrap()) / (2.0 * h);
        assert!(close(ztp_nll_grad_entry(m, 3, P).unwrap(), fd, 1e-6));
    }

    #[test]
    fn ztp_stable_against_high_precision_reference() {
        // Reference values from 256-bit arithmetic of
        // log(e^m - 1 + 1e-10) - x log(m + 1e-10) + log(x!).
        let cases = [
            (30.0, 1, 26.598802618334417715),
            (30.0, 7, 14.716779689406899763),
            (100.0, 1, 95.394829814010908632),
            (100.0, 7, 76.288970059141774724),
            (500.0, 1, 493.78539190157760826),
            (500.0, 7, 465.0229046721086721),
        ];
        for (m, x, reference) in cases {
            let v = ztp_nll_entry(m, x, P).unwrap();
            assert!(v.is_finite());
            assert!((v - reference).abs() <= 1e-9 * reference.abs(), "m={m} x={x}: {v} vs {reference}");
        }
    }

    fn random_model(dims: &[usize], rank: usize, rng: &mut ChaCha8Rng) -> KruskalModel {
        let shape = Shape::new(dims.to_vec()).unwrap();
        let n: usize = dims.iter().sum::<usize>() * rank;
        KruskalModel::from_flat(shape, rank, (0..n).map(|_| rng.random_range(0.3..1.4)).collect()).unwrap()
    }

    fn random_counts(shape: &Shape, rng: &mut ChaCha8Rng) -> SparseCountTensor {
        let entries = (0..shape.total())
            .map(|i| (i, if rng.random_bool(0.4) { 0 } else { rng.random_range(1..6) }))
            .collect();
        SparseCountTensor::from_linear(shape.clone(), entries).unwrap()
    }

    #[test]
    fn full_mask_matches_dense_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&[4, 4, 4], 3, &mut rng);
        let x = random_counts(model.shape(), &mut rng);
        let dense = crate::tensor::kruskal_to_dense(&model, None).unwrap();
        let reference: f64 = dense
            .values()
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let c = x.get_linear(i);
                let lf: f64 = (1..=c).map(|k| (k as f64).ln()).sum();
                m - c as f64 * (m + 1e-10).ln() + lf
            })
            .sum();
        for mask in [Mask::Full(model.shape().clone()), Mask::Indices(ObservationSet::full(model.shape().clone()))] {
            let v = masked_objective(&model, &x, &mask, LossKind::Poisson, P).unwrap();
            assert!((v - reference).abs() <= 1e-10 * reference.abs());
        }
    }

    #[test]
    fn empty_and_single_entry_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_model(&[3, 2, 2], 2, &mut rng);
        let shape = model.shape().clone();
        let x = SparseCountTensor::from_linear(shape.clone(), vec![(5, 3)]).unwrap();
        for kind in [LossKind::Poisson, LossKind::ZeroTruncatedPoisson] {
            let empty = Mask::Indices(ObservationSet::empty(shape.clone()));
            assert_eq!(masked_objective(&model, &x, &empty, kind, P).unwrap(), 0.0);
        }
        let single = Mask::Indices(ObservationSet::new(shape.clone(), vec![5]).unwrap());
        let m = model.entry(&shape.delinearize(5).unwrap()).unwrap();
        let p = masked_objective(&model, &x, &single, LossKind::Poisson, P).unwrap();
        assert!(close(p, poisson_nll_entry(m, 3, P), 1e-12));
        let z = masked_objective(&model, &x, &single, LossKind::ZeroTruncatedPoisson, P).unwrap();
        assert!(close(z, ztp_nll_entry(m, 3, P).unwrap(), 1e-12));
    }

    #[test]
    fn ztp_mask_with_zero_count_is_rejected() {
        let shape = Shape::new(vec![2, 2]).unwrap();
        let model = KruskalModel::from_flat(shape.clone(), 1, vec![1.0; 4]).unwrap();
        let x = SparseCountTensor::from_linear(shape.clone(), vec![(0, 1)]).unwrap();
        let mask = Mask::Indices(ObservationSet::new(shape, vec![0, 1]).unwrap());
        assert!(matches!(
            masked_objective(&model, &x, &mask, LossKind::ZeroTruncatedPoisson, P),
            Err(Error::Contract(_))
        ));
    }

    /// Central differences of the masked objective in every factor entry.
    fn fd_check(model: &KruskalModel, x: &SparseCountTensor, mask: &Mask, kind: LossKind) -> f64 {
        let plan = ObjectivePlan::new(x, mask, kind, P).unwrap();
        let (_, grad) = plan.value_and_gradient(model).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..grad.len() {
            let mut plus = model.flat_factors().to_vec();
            let mut minus = plus.clone();
            plus[k] += h;
            minus[k] -= h;
            let rebuild = |f: Vec<f64>| {
                KruskalModel::from_flat(model.shape().clone(), model.rank(), f)
                    .unwrap()
                    .with_weights(model.weights().to_vec())
                    .unwrap()
            };
            let fd = (plan.value(&rebuild(plus)).unwrap() - plan.value(&rebuild(minus)).unwrap()) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / fd.abs().max(grad[k].abs()).max(1.0);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = random_model(&[3, 3, 3], 2, &mut rng)
            .with_weights(vec![1.3, 0.7])
            .unwrap();
        let x = random_counts(model.shape(), &mut rng);
        let shape = model.shape().clone();
        let omega = ObservationSet::new(shape.clone(), (0..27).filter(|i| i % 3 != 1).collect()).unwrap();
        let big_omega = ObservationSet::new(shape.clone(), (0..27).filter(|i| i % 7 != 0).collect()).unwrap();
        let gamma = crate::tensor::restrict_to_nonzeros(&x, &omega).unwrap();
        for (mask, kind) in [
            (Mask::Full(shape.clone()), LossKind::Poisson),
            (Mask::Indices(omega.clone()), LossKind::Poisson),
            (Mask::Indices(big_omega), LossKind::Poisson),
            (Mask::Indices(gamma), LossKind::ZeroTruncatedPoisson),
        ] {
            assert!(fd_check(&model, &x, &mask, kind) <= 1e-5);
        }
    }

    #[test]
    fn zero_derivatives_give_zero_gradient() {
        // Every observed count equals its model entry, so each Poisson
        // per-entry derivative vanishes.
        let shape = Shape::new(vec![1, 1, 1]).unwrap();
        let model = KruskalModel::from_flat(shape.clone(), 1, vec![1.0, 2.0, 1.5]).unwrap();
        let x = SparseCountTensor::from_linear(shape.clone(), vec![(0, 3)]).unwrap();
        let grads = masked_objective_grad(
            &model,
            &x,
            &Mask::Indices(ObservationSet::full(shape)),
            LossKind::Poisson,
            StabilizationPolicy::new(1e-300).unwrap(),
        )
        .unwrap();
        assert!(grads.iter().flatten().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn single_entry_gradient_is_row_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&[3, 4, 2], 2, &mut rng);
        let shape = model.shape().clone();
        let lin = shape.linearize(&[1, 2, 0]).unwrap();
        let x = SparseCountTensor::from_linear(shape.clone(), vec![(lin, 4)]).unwrap();
        let mask = Mask::Indices(ObservationSet::new(shape, vec![lin]).unwrap());
        for kind in [LossKind::Poisson, LossKind::ZeroTruncatedPoisson] {
            let grads = masked_objective_grad(&model, &x, &mask, kind, P).unwrap();
            for (n, (g, touched)) in grads.iter().zip([1usize, 2, 0]).enumerate() {
                for (i, row) in g.chunks(2).enumerate() {
                    if i == touched {
                        assert!(row.iter().any(|&v| v != 0.0), "mode {n}");
                    } else {
                        assert!(row.iter().all(|&v| v == 0.0), "mode {n} row {i}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn entry_gradients_match_finite_differences(m in 1e-3f64..50.0, x in 0u64..=100) {
            let h = 1e-6 * m.max(1.0);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            let fd = (poisson_nll_entry(m + h, x, P) - poisson_nll_entry(m - h, x, P)) / (2.0 * h);
            prop_assert!(rel(poisson_nll_grad_entry(m, x, P), fd) <= 1e-5);
            if x >= 1 {
                let fd = (ztp_nll_entry(m + h, x, P).unwrap() - ztp_nll_entry(m - h, x, P).unwrap()) / (2.0 * h);
                prop_assert!(rel(ztp_nll_grad_entry(m, x, P).unwrap(), fd) <= 1e-5);
            }
        }

        #[test]
        fn truncation_lowers_the_per_entry_nll(m in 1e-3f64..50.0, x in 1u64..=100) {
            // poisson − ztp = m − log(eᵐ − 1 + eps) > 0
            let diff = poisson_nll_entry(m, x, P) - ztp_nll_entry(m, x, P).unwrap();
            let expect = m - (m.exp_m1() + P.eps()).ln();
            // Beyond m ≈ 36 the gap e⁻ᵐ falls below the spacing of doubles near m.
            if m <= 30.0 {
                prop_assert!(diff > 0.0);
            } else {
                prop_assert!(diff >= 0.0);
            }
            prop_assert!((diff - expect).abs() <= 1e-9 * expect.max(1.0));
        }

        #[test]
        fn objective_is_additive_over_mask_partitions(seed in any::<u64>(), parts in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_model(&[3, 4, 3], 2, &mut rng);
            let x = random_counts(model.shape(), &mut rng);
            let shape = model.shape().clone();
            let label: Vec<usize> = (0..shape.total()).map(|_| rng.random_range(0..parts)).collect();
            let whole = masked_objective(&model, &x, &Mask::Full(shape.clone()), LossKind::Poisson, P).unwrap();
            let mut sum = 0.0;
            for p in 0..parts {
                let idx = (0..shape.total()).filter(|&i| label[i] == p).collect();
                let mask = Mask::Indices(ObservationSet::new(shape.clone(), idx).unwrap());
                sum += masked_objective(&model, &x, &mask, LossKind::Poisson, P).unwrap();
            }
            prop_assert!((sum - whole).abs() <= 1e-12 * whole.abs());
        }
    }
}
