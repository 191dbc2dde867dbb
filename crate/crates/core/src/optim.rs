//! Box-constrained limited-memory quasi-Newton minimization.
//!
//! Each iteration fixes the variables that sit on a bound with the gradient
//! pushing outward, takes an L-BFGS direction on the remaining free
//! variables, and backtracks along the projected path until the Armijo
//! condition holds. A failed line search drops the curvature memory and
//! retries once along the projected steepest-descent direction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const CURVATURE_REJECT: f64 = 1e-12;
/// Objective differences below this fraction of |f| are treated as rounding.
const ROUNDING_NOISE: f64 = 16.0 * f64::EPSILON;

/// The same interval `[lower, upper]` applied to every variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    lower: f64,
    upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower > upper {
            return Err(Error::domain(format!("invalid box [{lower}, {upper}]")));
        }
        Ok(Bounds { lower, upper })
    }

    pub fn lower_only(lower: f64) -> Result<Self> {
        Self::new(lower, f64::INFINITY)
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    #[inline]
    fn clamp(&self, v: f64) -> f64 {
        v.max(self.lower).min(self.upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the projected gradient's infinity norm falls to this.
    pub grad_tol: f64,
    /// Stop when an accepted step lowers the objective by at most this
    /// fraction of `max(|f|, 1)`.
    pub func_tol: f64,
    pub max_line_search: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            memory: 5,
            max_iters: 500,
            grad_tol: 1e-6,
            func_tol: 1e-10,
            max_line_search: 20,
        }
    }
}

impl OptimOptions {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0
            || self.max_iters == 0
            || self.max_line_search == 0
            || !(self.grad_tol > 0.0)
            || !(self.func_tol > 0.0)
        {
            return Err(Error::domain(format!("optimizer options must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    GradTol,
    FuncTol,
    MaxIters,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub solution: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: Status,
    /// Objective at the starting point followed by one value per accepted
    /// step.
    pub objective_trace: Vec<f64>,
}

/// Elementwise clamp into the box.
pub fn project(x: &[f64], bounds: Bounds) -> Vec<f64> {
    x.iter().map(|&v| bounds.clamp(v)).collect()
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: Bounds) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| (bounds.clamp(xi - gi) - xi).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// `f(x + s) − f(x)`. When the difference is lost in rounding of `f`, the
/// trapezoid estimate `½ (g + g_new)ᵀ s` is used instead; it is exact for
/// quadratics and keeps the iteration moving once `f` stops resolving progress.
fn objective_change(f: f64, ft: f64, g: &[f64], gt: &[f64], s: &[f64]) -> f64 {
    let df = ft - f;
    if df.abs() <= ROUNDING_NOISE * f.abs().max(ft.abs()) {
        0.5 * (dot(g, s) + dot(gt, s))
    } else {
        df
    }
}

/// Two-loop recursion restricted to the free variables. Returns `−H g`.
fn lbfgs_direction(g: &[f64], free: &[bool], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().zip(free).map(|(&v, &f)| if f { v } else { 0.0 }).collect();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in history.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += si * (a - b);
        }
    }
    q.iter()
        .zip(free)
        .map(|(&v, &f)| if f { -v } else { 0.0 })
        .collect()
}

/// Minimizes `f` over the box. The callback returns the objective and its
/// gradient; a non-finite value at any evaluated (feasible) point aborts
/// with [`Error::Optimization`].
pub fn minimize<F>(mut f_and_grad: F, x0: &[f64], bounds: Bounds, opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    opts.validate()?;
    let mut x = project(x0, bounds);
    if x != x0 {
        log::warn!("starting point lies outside the box; clamped");
    }
    let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (f, g) = f_and_grad(x);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) || g.len() != x.len() {
            return Err(Error::Optimization {
                message: format!("callback returned a non-finite value or malformed gradient (f = {f})"),
                iterate: x.to_vec(),
            });
        }
        Ok((f, g))
    };

    let (mut f, mut g) = eval(&x)?;
    let mut trace = vec![f];
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let mut status = Status::MaxIters;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        if projected_gradient_norm(&x, &g, bounds) <= opts.grad_tol {
            status = Status::GradTol;
            break;
        }
        let free: Vec<bool> = x
            .iter()
            .zip(&g)
            .map(|(&xi, &gi)| !((xi <= bounds.lower && gi > 0.0) || (xi >= bounds.upper && gi < 0.0)))
            .collect();

        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                if history.is_empty() {
                    break;
                }
                history.clear();
            }
            let mut d = lbfgs_direction(&g, &free, &history);
            if dot(&d, &g) >= 0.0 {
                history.clear();
                d = lbfgs_direction(&g, &free, &history);
            }
            let mut t = if history.is_empty() {
                let dmax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if dmax > 1.0 {
                    1.0 / dmax
                } else {
                    1.0
                }
            } else {
                1.0
            };
            for _ in 0..opts.max_line_search {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(&xi, &di)| bounds.clamp(xi + t * di)).collect();
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let predicted = dot(&g, &step);
                if predicted >= 0.0 {
                    t *= 0.5;
                    continue;
                }
                let (ft, gt) = eval(&trial)?;
                let change = objective_change(f, ft, &g, &gt, &step);
                if change <= ARMIJO_C1 * predicted {
                    accepted = Some((trial, step, ft, gt, change));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((trial, s, ft, gt, change)) = accepted else {
            status = Status::LineSearchFailure;
            break;
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_REJECT * norm2(&s) * norm2(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back(Pair { rho: 1.0 / sy, s, y });
        }
        let decrease = -change / f.abs().max(ft.abs()).max(1.0);
        x = trial;
        f = ft;
        g = gt;
        trace.push(f);
        iterations += 1;
        if decrease <= opts.func_tol {
            status = Status::FuncTol;
            break;
        }
    }

    Ok(OptimResult {
        solution: x,
        objective: f,
        iterations,
        status,
        objective_trace: trace,
    })
}
