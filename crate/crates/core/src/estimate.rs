//! The Poisson, Oracle and ZTP maximum-likelihood estimators and their
//! relative-error metric.
//!
//! | estimator | entries used        | loss                   |
//! |-----------|---------------------|------------------------|
//! | Poisson   | every index         | Poisson                |
//! | Oracle    | Ω                   | Poisson                |
//! | ZTP       | Γ = nonzeros of Ω   | zero-truncated Poisson |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{factor_range, uniform_factors};
use crate::losses::{LossKind, Mask, ObjectivePlan, StabilizationPolicy};
use crate::optim::{minimize, Bounds, OptimOptions, Status};
use crate::rng::stream;
use crate::tensor::{restrict_to_nonzeros, KruskalModel, ObservationSet, Shape, SparseCountTensor};

/// Lower bound on every factor entry during fitting.
pub const FACTOR_LOWER_BOUND: f64 = 1e-10;

/// Above this many entries [`relative_error`] switches from an entrywise
/// pass to Gram-matrix identities.
const ENTRYWISE_ERROR_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Poisson,
    Oracle,
    Ztp,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Poisson, EstimatorKind::Oracle, EstimatorKind::Ztp];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Poisson => "poisson",
            EstimatorKind::Oracle => "oracle",
            EstimatorKind::Ztp => "ztp",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(EstimatorKind::Poisson),
            "oracle" => Ok(EstimatorKind::Oracle),
            "ztp" => Ok(EstimatorKind::Ztp),
            other => Err(Error::domain(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSpec {
    pub kind: EstimatorKind,
    /// Rank of the fitted model; may differ from the truth's.
    pub rank: usize,
    pub init_seed: u64,
    pub optim: OptimOptions,
    pub policy: StabilizationPolicy,
    /// Entry-scale interval `(β₀, α₀)` for the random start. Defaults to
    /// `(0.1, 2 × mean nonzero count)`.
    pub init_range: Option<(f64, f64)>,
}

impl FitSpec {
    pub fn new(kind: EstimatorKind, rank: usize, init_seed: u64) -> Self {
        FitSpec {
            kind,
            rank,
            init_seed,
            optim: OptimOptions::default(),
            policy: StabilizationPolicy::default(),
            init_range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kind: EstimatorKind,
    pub model: KruskalModel,
    pub final_nll: f64,
    pub iterations: usize,
    pub status: Status,
    pub rel_error: Option<f64>,
    /// Objective of the truth on the same data and mask, when known.
    pub truth_nll: Option<f64>,
    pub objective_trace: Vec<f64>,
}

impl FitResult {
    /// Whether the fit is at least as likely as the truth, up to the
    /// relative tolerance `tol`. `None` without a truth.
    pub fn beats_truth(&self, tol: f64) -> Option<bool> {
        self.truth_nll
            .map(|t| self.final_nll <= t + tol * t.abs())
    }
}

/// Mask and loss an estimator optimizes.
pub fn assemble_mask(
    kind: EstimatorKind,
    shape: &Shape,
    omega: &ObservationSet,
    gamma: &ObservationSet,
) -> Result<(Mask, LossKind)> {
    if omega.shape() != shape || gamma.shape() != shape {
        return Err(Error::contract("observation sets do not match the shape"));
    }
    if !gamma.is_subset_of(omega) {
        return Err(Error::contract("nonzero set is not contained in the trusted set"));
    }
    match kind {
        EstimatorKind::Poisson => Ok((Mask::Full(shape.clone()), LossKind::Poisson)),
        EstimatorKind::Oracle => Ok((Mask::Indices(omega.clone()), LossKind::Poisson)),
        EstimatorKind::Ztp => {
            if gamma.is_empty() {
                return Err(Error::InsufficientData(
                    "no nonzero observations for the zero-truncated estimator".into(),
                ));
            }
            Ok((Mask::Indices(gamma.clone()), LossKind::ZeroTruncatedPoisson))
        }
    }
}

fn initial_factors(spec: &FitSpec, shape: &Shape, x: &SparseCountTensor) -> Result<Vec<f64>> {
    let (lo, hi) = match spec.init_range {
        Some(r) => r,
        None => (0.1, (2.0 * x.mean_nonzero().unwrap_or(1.0)).max(0.1)),
    };
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::domain(format!("invalid initialization range ({lo}, {hi})")));
    }
    let (flo, fhi) = factor_range(lo, hi, spec.rank, shape.order());
    let mut rng = stream(spec.init_seed, "init");
    Ok(uniform_factors(&mut rng, shape.sum_dims() * spec.rank, flo, fhi))
}

/// Fits one estimator to counts `x` observed on `omega`.
///
/// The fitted model has unit weights; scale lives in the factors. A line
/// search failure triggers one restart of the solver from where it stopped.
pub fn fit(
    spec: &FitSpec,
    x: &SparseCountTensor,
    omega: &ObservationSet,
    truth: Option<&KruskalModel>,
) -> Result<FitResult> {
    if spec.rank == 0 {
        return Err(Error::domain("estimation rank must be >= 1"));
    }
    let shape = x.shape().clone();
    let gamma = restrict_to_nonzeros(x, omega)?;
    let (mask, loss) = assemble_mask(spec.kind, &shape, omega, &gamma)?;
    let plan = ObjectivePlan::new(x, &mask, loss, spec.policy)?;
    if let Some(t) = truth {
        if t.shape() != &shape {
            return Err(Error::contract("truth shape differs from the data shape"));
        }
    }

    let rank = spec.rank;
    let objective = |flat: &[f64]| -> (f64, Vec<f64>) {
        let model = KruskalModel::from_flat(shape.clone(), rank, flat.to_vec()).expect("layout is fixed");
        plan.value_and_gradient(&model).expect("shape checked")
    };
    let bounds = Bounds::lower_only(FACTOR_LOWER_BOUND)?;
    let x0 = initial_factors(spec, &shape, x)?;
    let mut result = minimize(objective, &x0, bounds, &spec.optim)?;
    if result.status == Status::LineSearchFailure {
        log::debug!("line search failed after {} iterations; restarting", result.iterations);
        let mut again = minimize(objective, &result.solution, bounds, &spec.optim)?;
        again.iterations += result.iterations;
        let mut trace = std::mem::take(&mut result.objective_trace);
        trace.extend(again.objective_trace.iter().skip(1));
        again.objective_trace = trace;
        result = again;
    }

    let model = KruskalModel::from_flat(shape, rank, result.solution)?;
    let final_nll = plan.value(&model)?;
    let rel_error = truth.map(|t| relative_error(t, &model)).transpose()?;
    let truth_nll = truth.map(|t| plan.value(t)).transpose()?;
    Ok(FitResult {
        kind: spec.kind,
        model,
        final_nll,
        iterations: result.iterations,
        status: result.status,
        rel_error,
        truth_nll,
        objective_trace: result.objective_trace,
    })
}

/// `‖truth − estimate‖ / ‖truth‖` in the Frobenius norm.
pub fn relative_error(truth: &KruskalModel, estimate: &KruskalModel) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::contract(format!(
            "shape mismatch: {:?} vs {:?}",
            truth.shape().dims(),
            estimate.shape().dims()
        )));
    }
    let shape = truth.shape();
    let (diff_sq, truth_sq) = if shape.total() <= ENTRYWISE_ERROR_LIMIT {
        let all: Vec<usize> = (0..shape.total()).collect();
        let coords = shape.coords_of(&all);
        let mut a = vec![0.0; all.len()];
        let mut b = vec![0.0; all.len()];
        truth.eval_coords(&coords, &mut a);
        estimate.eval_coords(&coords, &mut b);
        let d: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum();
        let t: f64 = a.iter().map(|p| p * p).sum();
        (d, t)
    } else {
        let tt = truth.inner(truth)?;
        let ee = estimate.inner(estimate)?;
        let te = truth.inner(estimate)?;
        ((tt - 2.0 * te + ee).max(0.0), tt)
    };
    if truth_sq == 0.0 {
        return Err(Error::domain("relative error undefined for an all-zero truth"));
    }
    Ok((diff_sq / truth_sq).sqrt())
}

/// Mean and sample standard deviation of the fits' relative errors.
pub fn average_relative_error(results: &[FitResult]) -> Result<(f64, f64)> {
    let errs = results
        .iter()
        .map(|r| {
            r.rel_error
                .ok_or_else(|| Error::contract("fit result carries no relative error"))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_and_std(&errs)
}

pub(crate) fn mean_and_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::contract("cannot average an empty list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{make_instance, GenConfig};
    use crate::losses::{poisson_nll_entry, ztp_nll_entry};
    use crate::tensor::kruskal_to_dense;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_problem(x: u64) -> (SparseCountTensor, ObservationSet) {
        let shape = Shape::new(vec![1, 1, 1]).unwrap();
        (
            SparseCountTensor::from_linear(shape.clone(), vec![(0, x)]).unwrap(),
            ObservationSet::full(shape),
        )
    }

    fn tight(kind: EstimatorKind) -> FitSpec {
        let mut s = FitSpec::new(kind, 1, 3);
        s.optim.grad_tol = 1e-10;
        s.optim.func_tol = 1e-15;
        s
    }

    #[test]
    fn mask_assembly() {
        let shape = Shape::new(vec![3, 3]).unwrap();
        let omega = ObservationSet::new(shape.clone(), vec![0, 2, 4, 7]).unwrap();
        let gamma = ObservationSet::new(shape.clone(), vec![2, 7]).unwrap();
        let (m, l) = assemble_mask(EstimatorKind::Poisson, &shape, &omega, &gamma).unwrap();
        assert_eq!((m.len(), l), (9, LossKind::Poisson));
        let (m, l) = assemble_mask(EstimatorKind::Oracle, &shape, &omega, &gamma).unwrap();
        assert_eq!((m, l), (Mask::Indices(omega.clone()), LossKind::Poisson));
        let (m, l) = assemble_mask(EstimatorKind::Ztp, &shape, &omega, &gamma).unwrap();
        assert_eq!((m, l), (Mask::Indices(gamma.clone()), LossKind::ZeroTruncatedPoisson));

        let empty = ObservationSet::empty(shape.clone());
        assert!(matches!(
            assemble_mask(EstimatorKind::Ztp, &shape, &omega, &empty),
            Err(Error::InsufficientData(_))
        ));
        assert!(assemble_mask(EstimatorKind::Oracle, &shape, &gamma, &omega).is_err());
    }

    #[test]
    fn scalar_poisson_fit_recovers_the_count() {
        let (x, omega) = scalar_problem(3);
        // Grid oracle over m.
        let p = StabilizationPolicy::default();
        let best = (1..=100_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| poisson_nll_entry(*a, 3, p).total_cmp(&poisson_nll_entry(*b, 3, p)))
            .unwrap();
        assert!((best - 3.0).abs() < 1e-4);
        let r = fit(&tight(EstimatorKind::Poisson), &x, &omega, None).unwrap();
        let m = r.model.entry(&[0, 0, 0]).unwrap();
        assert!((m - 3.0).abs() <= 1e-4, "fitted {m}");
    }

    #[test]
    fn scalar_ztp_fit_with_single_count_heads_to_the_bound() {
        let (x, omega) = scalar_problem(1);
        let p = StabilizationPolicy::default();
        let r = fit(&tight(EstimatorKind::Ztp), &x, &omega, None).unwrap();
        let m = r.model.entry(&[0, 0, 0]).unwrap();
        assert!(r.final_nll <= ztp_nll_entry(1.0, 1, p).unwrap());
        let grid_min = (0..=100_000)
            .map(|k| (1e-10f64).max(k as f64 * 1e-4))
            .map(|m| ztp_nll_entry(m, 1, p).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(r.final_nll <= grid_min + 1e-6);
        assert!(m < 1e-3, "fitted {m}");
        assert!(r.model.flat_factors().iter().all(|&v| v >= FACTOR_LOWER_BOUND));
    }

    #[test]
    fn consistency_on_constant_truth() {
        let shape = Shape::new(vec![5, 5, 5]).unwrap();
        let c = (2.0f64).cbrt();
        let truth = KruskalModel::from_flat(shape.clone(), 1, vec![c; 15]).unwrap();
        let omega = ObservationSet::full(shape);
        let mut rng = crate::rng::stream(4, "counts");
        let x = crate::generate::sample_counts(&truth, &omega, &mut rng).unwrap();
        let best = (0..3)
            .map(|seed| {
                let spec = FitSpec::new(EstimatorKind::Poisson, 1, seed);
                fit(&spec, &x, &omega, Some(&truth)).unwrap()
            })
            .min_by(|a, b| a.final_nll.total_cmp(&b.final_nll))
            .unwrap();
        assert_eq!(best.beats_truth(1e-10), Some(true));

        // With every entry observed, the rank-1 Poisson MLE has the closed
        // form x_i·· x_·j· x_··k / x_···².
        let mut marg = [[0.0f64; 5]; 3];
        let mut total = 0.0;
        for (lin, v) in x.iter() {
            let idx = x.shape().delinearize(lin).unwrap();
            for (n, &i) in idx.iter().enumerate() {
                marg[n][i] += v as f64;
            }
            total += v as f64;
        }
        let mut worst = 0.0f64;
        best.model.for_each_entry(|lin, v| {
            let idx = x.shape().delinearize(lin).unwrap();
            let mle = marg[0][idx[0]] * marg[1][idx[1]] * marg[2][idx[2]] / (total * total);
            worst = worst.max((v - mle).abs());
        });
        assert!(worst <= 1e-5, "max deviation from closed-form MLE {worst}");
        // 13 free parameters at variance 2 against ‖M‖² = 500 puts the
        // expected relative error near 0.23.
        let err = best.rel_error.unwrap();
        assert!(err > 0.1 && err < 0.35, "{err}");
    }

    #[test]
    fn poisson_and_oracle_coincide_on_full_omega() {
        let cfg = GenConfig {
            dims: vec![6, 5, 4],
            rank: 2,
            beta: 1.0,
            alpha: 2.5,
            seed: 8,
        };
        let inst = make_instance(&cfg, 120).unwrap();
        let mut spec = FitSpec::new(EstimatorKind::Poisson, 2, 5);
        let a = fit(&spec, &inst.counts, &inst.omega, Some(&inst.truth)).unwrap();
        spec.kind = EstimatorKind::Oracle;
        let b = fit(&spec, &inst.counts, &inst.omega, Some(&inst.truth)).unwrap();
        assert_eq!(a.objective_trace, b.objective_trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn ztp_without_nonzeros_is_rejected() {
        let shape = Shape::new(vec![2, 2, 2]).unwrap();
        let x = SparseCountTensor::empty(shape.clone());
        let omega = ObservationSet::full(shape);
        assert!(matches!(
            fit(&FitSpec::new(EstimatorKind::Ztp, 1, 0), &x, &omega, None),
            Err(Error::InsufficientData(_))
        ));
    }

    fn random_model(dims: &[usize], rank: usize, seed: u64) -> KruskalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(dims.to_vec()).unwrap();
        let n = dims.iter().sum::<usize>() * rank;
        KruskalModel::from_flat(shape, rank, (0..n).map(|_| rng.random_range(0.2..1.2)).collect()).unwrap()
    }

    #[test]
    fn relative_error_examples() {
        let t = random_model(&[4, 4, 4], 3, 1);
        assert!(relative_error(&t, &t).unwrap() <= 1e-12);
        let doubled = t.clone().with_weights(vec![2.0; 3]).unwrap();
        assert!((relative_error(&t, &doubled).unwrap() - 1.0).abs() <= 1e-12);

        let e = random_model(&[4, 4, 4], 2, 2);
        let (dt, de) = (kruskal_to_dense(&t, None).unwrap(), kruskal_to_dense(&e, None).unwrap());
        let num: f64 = dt.values().iter().zip(de.values()).map(|(a, b)| (a - b).powi(2)).sum();
        let reference = (num / dt.values().iter().map(|a| a * a).sum::<f64>()).sqrt();
        assert!((relative_error(&t, &e).unwrap() - reference).abs() <= 1e-10);

        let other = random_model(&[4, 4, 3], 2, 2);
        assert!(matches!(relative_error(&t, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn relative_error_ignores_component_order() {
        let t = random_model(&[3, 4, 5], 3, 5);
        let e = random_model(&[3, 4, 5], 3, 6);
        let perm = [2usize, 0, 1];
        let factors: Vec<Vec<f64>> = (0..3)
            .map(|n| {
                e.factor_rows(n)
                    .flat_map(|row| perm.iter().map(|&p| row[p]).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        let permuted = KruskalModel::new(e.shape().clone(), vec![1.0; 3], factors).unwrap();
        let a = relative_error(&t, &e).unwrap();
        let b = relative_error(&t, &permuted).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    fn with_error(e: f64) -> FitResult {
        FitResult {
            kind: EstimatorKind::Oracle,
            model: KruskalModel::from_flat(Shape::new(vec![1]).unwrap(), 1, vec![1.0]).unwrap(),
            final_nll: 0.0,
            iterations: 0,
            status: Status::GradTol,
            rel_error: Some(e),
            truth_nll: None,
            objective_trace: vec![],
        }
    }

    #[test]
    fn averaging() {
        assert_eq!(average_relative_error(&[with_error(0.4)]).unwrap(), (0.4, 0.0));
        let (m, s) = average_relative_error(&[with_error(0.1), with_error(0.3)]).unwrap();
        assert!((m - 0.2).abs() < 1e-15 && (s - 0.141421356).abs() < 1e-8);
        let same: Vec<_> = (0..50).map(|_| with_error(0.37)).collect();
        let (m, s) = average_relative_error(&same).unwrap();
        assert!((m - 0.37).abs() < 1e-15 && s < 1e-15);
        assert!(average_relative_error(&[]).is_err());
    }
}
