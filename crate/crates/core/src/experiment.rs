//! Factorial sweeps over trusted-set fractions with replicate averaging.
//!
//! One truth is drawn per config and shared by every fraction and
//! replicate. Each (fraction, replicate) pair gets its own Ω and count
//! substreams, and every method fitted on a replicate starts from the same
//! random initialization.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit, mean_and_std, EstimatorKind, FitSpec};
use crate::generate::{generate_truth, make_instance_replicate, GenConfig};
use crate::optim::{OptimOptions, Status};
use crate::rng::derive_seed;
use crate::tensor::Shape;
use crate::theory::dimension_requirement_met;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub order: usize,
    /// Extent of every mode; shapes are cubic.
    pub dims: usize,
    pub rank: usize,
    pub beta: f64,
    pub alpha: f64,
    pub omega_fractions: Vec<f64>,
    pub replicates: usize,
    #[serde(default = "all_methods")]
    pub methods: Vec<EstimatorKind>,
    pub seed: u64,
    #[serde(default)]
    pub optim: OptimOptions,
}

fn all_methods() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

/// Fractions used for the full-scale trusted-set sweep.
pub fn paper_fractions() -> Vec<f64> {
    let mut f: Vec<f64> = (1..=5).map(|k| k as f64 / 100.0).collect();
    f.extend((2..=20).map(|k| k as f64 * 0.05));
    f
}

impl ExperimentConfig {
    /// Desk-scale default: β = 1, α = 2.5, 100×100×100, rank 5, five
    /// replicates.
    pub fn desk_default(seed: u64) -> Self {
        ExperimentConfig {
            order: 3,
            dims: 100,
            rank: 5,
            beta: 1.0,
            alpha: 2.5,
            omega_fractions: vec![0.05, 0.3, 0.6, 1.0],
            replicates: 5,
            methods: all_methods(),
            seed,
            optim: OptimOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.optim.validate()?;
        if self.replicates == 0 {
            return Err(Error::domain("need at least one replicate"));
        }
        if self.methods.is_empty() {
            return Err(Error::domain("no methods selected"));
        }
        let mut sorted = self.methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.methods.len() {
            return Err(Error::domain("methods listed more than once"));
        }
        if self.omega_fractions.is_empty() {
            return Err(Error::domain("no trusted-set fractions given"));
        }
        for w in self.omega_fractions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::domain("fractions must be strictly ascending"));
            }
        }
        if self.omega_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::domain("fractions must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            dims: vec![self.dims; self.order],
            rank: self.rank,
            beta: self.beta,
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    /// Configs for the full-scale runs: extents 50, 100 and 200 with 50
    /// replicates each, all else unchanged.
    pub fn paper_scale(&self) -> Vec<ExperimentConfig> {
        [50, 100, 200]
            .into_iter()
            .map(|dims| ExperimentConfig {
                dims,
                replicates: 50,
                ..self.clone()
            })
            .collect()
    }

    fn omega_size(&self, shape: &Shape, fraction: f64) -> usize {
        ((fraction * shape.total() as f64).round() as usize).min(shape.total())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    /// ZTP fit skipped: no nonzero counts on Ω.
    EmptyNonzeroSet,
    /// The fit ended with a larger objective than the truth.
    TruthMoreLikely,
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub method: EstimatorKind,
    pub omega_fraction: f64,
    pub replicate: usize,
    pub rel_error: Option<f64>,
    pub iterations: usize,
    pub status: Option<Status>,
    pub flag: Option<FlagReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: EstimatorKind,
    pub omega_fraction: f64,
    /// Over unflagged fits; NaN when every fit was flagged.
    pub mean_rel_error: f64,
    pub std_rel_error: f64,
    pub mean_iterations: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub fits: Vec<FitRecord>,
}

impl SweepResult {
    pub fn row(&self, method: EstimatorKind, fraction: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.omega_fraction == fraction)
    }
}

fn run_replicate(
    cfg: &ExperimentConfig,
    gen: &GenConfig,
    truth: &crate::tensor::KruskalModel,
    fraction: f64,
    replicate: usize,
) -> Result<Vec<FitRecord>> {
    let shape = truth.shape();
    let size = cfg.omega_size(shape, fraction);
    let inst = make_instance_replicate(gen, truth, size, replicate)?;
    let init_seed = derive_seed(cfg.seed, &format!("init:{size}:{replicate}"));
    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let mut record = FitRecord {
            method,
            omega_fraction: fraction,
            replicate,
            rel_error: None,
            iterations: 0,
            status: None,
            flag: None,
        };
        let mut spec = FitSpec::new(method, cfg.rank, init_seed);
        spec.optim = cfg.optim;
        match fit(&spec, &inst.counts, &inst.omega, Some(truth)) {
            Ok(r) => {
                record.rel_error = r.rel_error;
                record.iterations = r.iterations;
                record.status = Some(r.status);
                if r.beats_truth(cfg.optim.func_tol) == Some(false) {
                    record.flag = Some(FlagReason::TruthMoreLikely);
                }
            }
            Err(Error::InsufficientData(msg)) => {
                log::warn!("{method} fit skipped at fraction {fraction}, replicate {replicate}: {msg}");
                record.flag = Some(FlagReason::EmptyNonzeroSet);
            }
            Err(e) => return Err(e),
        }
        out.push(record);
    }
    Ok(out)
}

/// Runs the sweep on at most `workers` threads (all available when `None`).
/// The result does not depend on the thread count.
pub fn run_sweep(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<SweepResult> {
    cfg.validate()?;
    let gen = cfg.gen_config();
    let shape = gen.shape()?;
    if !dimension_requirement_met(&shape) {
        log::warn!(
            "extent {} is below the dimension requirement for order {}",
            cfg.dims,
            cfg.order
        );
    }
    let truth = generate_truth(&gen)?;
    let jobs: Vec<(f64, usize)> = cfg
        .omega_fractions
        .iter()
        .flat_map(|&f| (0..cfg.replicates).map(move |r| (f, r)))
        .collect();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::domain("worker count must be >= 1"));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::contract(format!("cannot build thread pool: {e}")))?;
    let per_job = pool.install(|| {
        jobs.par_iter()
            .map(|&(f, r)| run_replicate(cfg, &gen, &truth, f, r))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut fits: Vec<FitRecord> = per_job.into_iter().flatten().collect();
    fits.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.omega_fraction.total_cmp(&b.omega_fraction))
            .then(a.replicate.cmp(&b.replicate))
    });

    let mut methods = cfg.methods.clone();
    methods.sort();
    let mut rows = Vec::new();
    for &method in &methods {
        for &fraction in &cfg.omega_fractions {
            let group: Vec<&FitRecord> = fits
                .iter()
                .filter(|r| r.method == method && r.omega_fraction == fraction)
                .collect();
            let flagged = group.iter().filter(|r| r.flag.is_some()).count();
            let used: Vec<&FitRecord> = group.iter().copied().filter(|r| r.flag.is_none()).collect();
            let errs: Vec<f64> = used.iter().filter_map(|r| r.rel_error).collect();
            let (mean, std) = if errs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_and_std(&errs)?
            };
            let mean_iterations = if used.is_empty() {
                f64::NAN
            } else {
                used.iter().map(|r| r.iterations as f64).sum::<f64>() / used.len() as f64
            };
            rows.push(SweepRow {
                method,
                omega_fraction: fraction,
                mean_rel_error: mean,
                std_rel_error: std,
                mean_iterations,
                flagged,
            });
        }
    }
    Ok(SweepResult { rows, fits })
}

/// Problems found in a finished sweep; empty when all checks pass.
pub fn check_invariants(cfg: &ExperimentConfig, result: &SweepResult) -> Vec<String> {
    let mut problems = Vec::new();
    if result.rows.len() != cfg.methods.len() * cfg.omega_fractions.len() {
        problems.push(format!(
            "expected {} rows, found {}",
            cfg.methods.len() * cfg.omega_fractions.len(),
            result.rows.len()
        ));
    }
    for r in &result.rows {
        let tag = format!("{} at fraction {}", r.method, r.omega_fraction);
        if !(r.mean_rel_error >= 0.0 && r.mean_rel_error.is_finite()) {
            problems.push(format!("{tag}: mean error {} is not a finite nonnegative number", r.mean_rel_error));
        }
        if r.flagged == 0 && cfg.replicates == 1 && r.std_rel_error != 0.0 {
            problems.push(format!("{tag}: single replicate with nonzero std"));
        }
        if result
            .rows
            .iter()
            .filter(|o| o.method == r.method && o.omega_fraction == r.omega_fraction)
            .count()
            != 1
        {
            problems.push(format!("{tag}: duplicate row"));
        }
    }
    if let (Some(p), Some(o)) = (
        result.row(EstimatorKind::Poisson, 1.0),
        result.row(EstimatorKind::Oracle, 1.0),
    ) {
        if (p.mean_rel_error - o.mean_rel_error).abs() > 1e-10 {
            problems.push(format!(
                "poisson and oracle differ on the full index set: {} vs {}",
                p.mean_rel_error, o.mean_rel_error
            ));
        }
    }
    problems
}

/// Plain decimal with 10 significant digits.
pub fn format_sig10(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    // Round first so the exponent reflects the printed value (9.9999999999 → 10).
    let sci = format!("{v:.9e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("exponent");
    let decimals = (9 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub const CSV_HEADER: [&str; 6] = [
    "method",
    "omega_fraction",
    "mean_rel_error",
    "std_rel_error",
    "mean_iterations",
    "flagged",
];

pub fn emit_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_HEADER)?;
    for r in &result.rows {
        w.write_record([
            r.method.name().to_string(),
            format_sig10(r.omega_fraction),
            format_sig10(r.mean_rel_error),
            format_sig10(r.std_rel_error),
            format_sig10(r.mean_iterations),
            r.flagged.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`emit_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: k + 2,
            message,
        };
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", CSV_HEADER[i])))
        };
        rows.push(SweepRow {
            method: rec[0].parse().map_err(|e: Error| bad(e.to_string()))?,
            omega_fraction: num(1)?,
            mean_rel_error: num(2)?,
            std_rel_error: num(3)?,
            mean_iterations: num(4)?,
            flagged: rec[5].parse().map_err(|e| bad(format!("column flagged: {e}")))?,
        });
    }
    Ok(rows)
}

/// Writes a gnuplot script plotting mean error with std error bars against
/// the trusted-set fraction, one curve per method.
pub fn write_gnuplot_script(csv_path: impl AsRef<Path>, script_path: impl AsRef<Path>) -> Result<()> {
    let script_path = script_path.as_ref();
    let csv_name = csv_path.as_ref().display();
    let script = format!(
        "set datafile separator ','\n\
         set key top right\n\
         set logscale y\n\
         set xlabel 'trusted fraction |Omega| / I^N'\n\
         set ylabel 'mean relative error'\n\
         methods = 'poisson oracle ztp'\n\
         plot for [m in methods] '{csv_name}' every ::1 \\\n  \
         using 2:(strcol(1) eq m ? $3 : 1/0):4 with yerrorlines title m\n"
    );
    std::fs::write(script_path, script).map_err(|e| Error::io(script_path, e))
}
