//! Closed-form quantities from the error analysis of the estimators: KL
//! divergences and their quadratic lower bounds, the ZTP error amplification
//! factor κ, the dimension requirement, and the right-hand sides of the
//! error bounds for the ZTP and Oracle estimators.
//!
//! `e^β − 1`, `e^β − β − 1` and `1 − e^{−p}` are always formed without
//! subtracting nearly equal quantities, since β as small as 10⁻³ is in use.

use rayon::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Shape;

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `e^x − 1 − x` for `x ≥ 0`.
pub(crate) fn exp_minus_linear(x: f64) -> f64 {
    if x < 0.5 {
        // Taylor series; 25 terms exceed double precision on [0, 0.5).
        let mut term = x * x / 2.0;
        let mut sum = 0.0;
        for k in 3..=27 {
            sum += term;
            term *= x / k as f64;
        }
        sum
    } else {
        x.exp_m1() - x
    }
}

/// `log(e^x − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// Poisson KL divergence `D(p‖q) = p log(p/q) − (p − q)`.
pub fn kl_poisson(p: f64, q: f64) -> Result<f64> {
    positive("p", p)?;
    positive("q", q)?;
    Ok(p * (p / q).ln() - (p - q))
}

/// Zero-truncated Poisson KL divergence
/// `D₀(p‖q) = p/(1 − e^{−p}) · log(p/q) − (log(e^p − 1) − log(e^q − 1))`.
pub fn kl_ztp(p: f64, q: f64) -> Result<f64> {
    positive("p", p)?;
    positive("q", q)?;
    let mean = p / -(-p).exp_m1();
    Ok(mean * (p / q).ln() - (ln_expm1(p) - ln_expm1(q)))
}

/// Error amplification factor `κ = ((4+β)e^β − 4) / (2(e^β − β − 1))`.
pub fn kappa(beta: f64) -> Result<f64> {
    positive("beta", beta)?;
    if beta > 700.0 {
        // e^β overflows; κ → (4+β)/2 in the limit.
        return Ok((4.0 + beta) / 2.0);
    }
    let numer = 4.0 * beta.exp_m1() + beta * beta.exp();
    Ok(numer / (2.0 * exp_minus_linear(beta)))
}

/// `c_β = (e^β − β − 1)/(e^β − 1)`.
pub fn c_beta(beta: f64) -> Result<f64> {
    positive("beta", beta)?;
    if beta > 700.0 {
        return Ok(1.0);
    }
    Ok(exp_minus_linear(beta) / beta.exp_m1())
}

/// `min_n I_n ≥ (N − 1) log₂²(max_n I_n) + 1`.
pub fn dimension_requirement_met(shape: &Shape) -> bool {
    let dims = shape.dims();
    let lo = *dims.iter().min().expect("nonempty shape") as f64;
    let hi = *dims.iter().max().expect("nonempty shape") as f64;
    let l = hi.log2();
    lo >= (shape.order() as f64 - 1.0) * l * l + 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub shape: Shape,
    pub beta: f64,
    pub alpha: f64,
    pub rank_true: usize,
    pub rank_est: usize,
    pub omega_size: usize,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        positive("beta", self.beta)?;
        positive("alpha", self.alpha)?;
        if self.beta > self.alpha {
            return Err(Error::domain("need beta <= alpha"));
        }
        if self.rank_true == 0 || self.rank_est == 0 {
            return Err(Error::domain("ranks must be >= 1"));
        }
        if self.omega_size < 2 {
            return Err(Error::domain("omega size must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// ZTP estimator, nonnegative CP rank.
    ZtpNncp,
    /// ZTP estimator, general CP rank.
    ZtpCp,
    /// Oracle (Poisson on Ω) estimator, nonnegative CP rank.
    PoissonNncp,
    /// Oracle estimator, general CP rank.
    PoissonCp,
}

impl std::str::FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ztp_nncp" => Ok(BoundKind::ZtpNncp),
            "ztp_cp" => Ok(BoundKind::ZtpCp),
            "poisson_nncp" => Ok(BoundKind::PoissonNncp),
            "poisson_cp" => Ok(BoundKind::PoissonCp),
            other => Err(Error::domain(format!("unknown bound kind '{other}'"))),
        }
    }
}

/// Right-hand side of the squared relative error bound
/// `‖M − M̃‖² / ‖M‖² ≤ …`. Returned as is, including when it exceeds one.
pub fn theorem_bound(inputs: &BoundInputs, kind: BoundKind) -> Result<f64> {
    inputs.validate()?;
    let BoundInputs {
        beta,
        alpha,
        rank_true,
        rank_est,
        omega_size,
        ..
    } = *inputs;
    let omega = omega_size as f64;
    let order = inputs.shape.order() as i32;
    let e2 = std::f64::consts::E * std::f64::consts::E;
    let log_term = alpha * (e2 - 2.0) + 3.0 * omega.log2();
    let scale = (inputs.shape.sum_dims() as f64).sqrt() / omega.sqrt();

    let rank_term = match kind {
        BoundKind::ZtpNncp | BoundKind::PoissonNncp => (rank_true + rank_est) as f64,
        BoundKind::ZtpCp | BoundKind::PoissonCp => {
            let r = rank_true as f64;
            let s = rank_est as f64;
            (r * r.sqrt()).powi(order - 1) + (s * s.sqrt()).powi(order - 1)
        }
    };
    let lead = match kind {
        BoundKind::PoissonNncp | BoundKind::PoissonCp => 128.0 * alpha * (alpha + 1.0) / beta.powi(3),
        BoundKind::ZtpNncp | BoundKind::ZtpCp => {
            let (numer, denom) = if beta > 700.0 {
                // Ratio of the exponentials' leading terms.
                (4.0 + beta, 1.0)
            } else {
                (4.0 * beta.exp_m1() + beta * beta.exp(), exp_minus_linear(beta))
            };
            64.0 * alpha * (alpha + 1.0) * numer / (denom * beta.powi(3))
        }
    };
    Ok(lead * log_term * rank_term * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlViolation {
    pub p: f64,
    pub q: f64,
    /// `"poisson"` for `D ≥ (p−q)²/(2α)`, `"ztp"` for
    /// `(1 − e^{−p}) D₀ ≥ c_β (p−q)²/(2α)`.
    pub inequality: String,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub beta: f64,
    pub alpha: f64,
    pub samples: usize,
    pub passed: usize,
    pub poisson_violations: usize,
    pub ztp_violations: usize,
    /// Smallest `lhs − rhs` seen for each inequality.
    pub worst_poisson_margin: f64,
    pub worst_ztp_margin: f64,
    /// First few offending pairs.
    pub violations: Vec<KlViolation>,
}

impl KlReport {
    pub fn ok(&self) -> bool {
        self.poisson_violations == 0 && self.ztp_violations == 0
    }
}

/// Absolute slack allowed on both inequalities.
pub const KL_SLACK: f64 = 1e-12;
const KL_CHUNK: usize = 1 << 14;
const MAX_REPORTED: usize = 16;

fn margins(p: f64, q: f64, alpha: f64, cb: f64) -> Result<(f64, f64)> {
    let quad = (p - q) * (p - q) / (2.0 * alpha);
    let poisson = kl_poisson(p, q)? - quad;
    let ztp = -(-p).exp_m1() * kl_ztp(p, q)? - cb * quad;
    Ok((poisson, ztp))
}

/// Samples `(p, q)` uniformly on `[β, α]²` and checks both quadratic KL
/// lower bounds. The corners `(β, α)`, `(α, β)` and the diagonal point
/// `(β, β)` are always included on top of the random draws.
pub fn verify_kl_bounds(beta: f64, alpha: f64, samples: usize, seed: u64) -> Result<KlReport> {
    positive("beta", beta)?;
    positive("alpha", alpha)?;
    if beta > alpha {
        return Err(Error::domain("need beta <= alpha"));
    }
    if samples == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    let cb = c_beta(beta)?;
    let chunks: Vec<usize> = (0..samples.div_ceil(KL_CHUNK)).collect();
    let partial = chunks
        .par_iter()
        .map(|&c| -> Result<Vec<(f64, f64, f64, f64)>> {
            let mut rng = stream(seed, &format!("kl:{c}"));
            let n = KL_CHUNK.min(samples - c * KL_CHUNK);
            let mut pairs: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(beta..=alpha), rng.random_range(beta..=alpha)))
                .collect();
            if c == 0 {
                pairs.extend([(beta, alpha), (alpha, beta), (beta, beta)]);
            }
            pairs
                .into_iter()
                .map(|(p, q)| margins(p, q, alpha, cb).map(|(a, b)| (p, q, a, b)))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = KlReport {
        beta,
        alpha,
        samples: 0,
        passed: 0,
        poisson_violations: 0,
        ztp_violations: 0,
        worst_poisson_margin: f64::INFINITY,
        worst_ztp_margin: f64::INFINITY,
        violations: Vec::new(),
    };
    for (p, q, mp, mz) in partial.into_iter().flatten() {
        report.samples += 1;
        report.worst_poisson_margin = report.worst_poisson_margin.min(mp);
        report.worst_ztp_margin = report.worst_ztp_margin.min(mz);
        let bad_p = mp < -KL_SLACK;
        let bad_z = mz < -KL_SLACK;
        if bad_p {
            report.poisson_violations += 1;
        }
        if bad_z {
            report.ztp_violations += 1;
        }
        if !bad_p && !bad_z {
            report.passed += 1;
        }
        for (bad, name, margin) in [(bad_p, "poisson", mp), (bad_z, "ztp", mz)] {
            if bad && report.violations.len() < MAX_REPORTED {
                report.violations.push(KlViolation {
                    p,
                    q,
                    inequality: name.into(),
                    margin,
                });
            }
        }
    }
    Ok(report)
}
