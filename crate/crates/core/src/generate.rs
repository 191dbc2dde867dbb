//! Seeded synthetic problems: a ground-truth Kruskal model with every entry
//! in `[β, α]`, a uniformly sampled trusted set Ω, and Poisson counts on Ω.
//!
//! Indices outside Ω are unobserved. Read back as zeros they are the false
//! zeros the estimators have to cope with.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::sampling::{poisson, sample_without_replacement};
use crate::tensor::{restrict_to_nonzeros, KruskalModel, ObservationSet, Shape, SparseCountTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub beta: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn shape(&self) -> Result<Shape> {
        Shape::new(self.dims.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        if self.rank == 0 {
            return Err(Error::domain("rank must be >= 1"));
        }
        if !(self.beta > 0.0 && self.beta <= self.alpha && self.alpha.is_finite()) {
            return Err(Error::domain(format!(
                "need 0 < beta <= alpha, got beta = {}, alpha = {}",
                self.beta, self.alpha
            )));
        }
        Ok(())
    }

    /// Interval `[(β/R)^{1/N}, (α/R)^{1/N}]` the factor entries are drawn from.
    pub fn factor_range(&self) -> (f64, f64) {
        factor_range(self.beta, self.alpha, self.rank, self.dims.len())
    }
}

pub(crate) fn factor_range(lo: f64, hi: f64, rank: usize, order: usize) -> (f64, f64) {
    let p = 1.0 / order as f64;
    ((lo / rank as f64).powf(p), (hi / rank as f64).powf(p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub truth: KruskalModel,
    pub counts: SparseCountTensor,
    pub omega: ObservationSet,
    pub gamma: ObservationSet,
}

pub(crate) fn uniform_factors<R: Rng + ?Sized>(rng: &mut R, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    if lo == hi {
        return vec![lo; len];
    }
    (0..len).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Truth model with unit weights and i.i.d. uniform factor entries, drawn
/// from the `"truth"` substream of the seed.
pub fn generate_truth(cfg: &GenConfig) -> Result<KruskalModel> {
    cfg.validate()?;
    let shape = cfg.shape()?;
    let (lo, hi) = cfg.factor_range();
    let mut rng = stream(cfg.seed, "truth");
    let flat = uniform_factors(&mut rng, shape.sum_dims() * cfg.rank, lo, hi);
    KruskalModel::from_flat(shape, cfg.rank, flat)
}

/// Independent Poisson draws at every index of Ω with mean equal to the
/// truth entry. Zero draws are left out of the sparse result.
pub fn sample_counts(
    truth: &KruskalModel,
    omega: &ObservationSet,
    rng: &mut StreamRng,
) -> Result<SparseCountTensor> {
    if truth.shape() != omega.shape() {
        return Err(Error::contract("truth and observation set shapes differ"));
    }
    let shape = truth.shape();
    let coords = shape.coords_of(omega.indices());
    let mut means = vec![0.0; omega.len()];
    truth.eval_coords(&coords, &mut means);
    let mut entries = Vec::new();
    for (&lin, &m) in omega.indices().iter().zip(&means) {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::contract(format!(
                "Poisson mean {m} at index {:?} is not positive",
                shape.delinearize(lin)?
            )));
        }
        let k = poisson(rng, m);
        if k > 0 {
            entries.push((lin, k));
        }
    }
    SparseCountTensor::from_linear(shape.clone(), entries)
}

/// Uniform random subset of the linearized index set of the given size.
pub fn sample_omega(shape: &Shape, size: usize, rng: &mut StreamRng) -> Result<ObservationSet> {
    if size > shape.total() {
        return Err(Error::contract(format!(
            "cannot sample {size} indices from {} entries",
            shape.total()
        )));
    }
    let idx = sample_without_replacement(rng, shape.total(), size);
    Ok(ObservationSet::from_sorted_unchecked(shape.clone(), idx))
}

/// Names of the Ω and count substreams for one replicate of one Ω size.
pub(crate) fn replicate_streams(omega_size: usize, replicate: usize) -> (String, String) {
    (
        format!("omega:{omega_size}:{replicate}"),
        format!("counts:{omega_size}:{replicate}"),
    )
}

/// Truth, Ω, counts and Γ for replicate `replicate` of an Ω size. The
/// truth depends on the seed alone, so every Ω size and replicate of a
/// config shares it.
pub fn make_instance_replicate(
    cfg: &GenConfig,
    truth: &KruskalModel,
    omega_size: usize,
    replicate: usize,
) -> Result<ProblemInstance> {
    let shape = cfg.shape()?;
    let (omega_name, counts_name) = replicate_streams(omega_size, replicate);
    let omega = sample_omega(&shape, omega_size, &mut stream(cfg.seed, &omega_name))?;
    let counts = sample_counts(truth, &omega, &mut stream(cfg.seed, &counts_name))?;
    let gamma = restrict_to_nonzeros(&counts, &omega)?;
    Ok(ProblemInstance {
        truth: truth.clone(),
        counts,
        omega,
        gamma,
    })
}

pub fn make_instance(cfg: &GenConfig, omega_size: usize) -> Result<ProblemInstance> {
    let truth = generate_truth(cfg)?;
    make_instance_replicate(cfg, &truth, omega_size, 0)
}
