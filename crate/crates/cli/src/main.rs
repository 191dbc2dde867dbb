use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ztpc::experiment::{check_invariants, emit_csv, run_sweep, write_gnuplot_script, ExperimentConfig};
use ztpc::io::{read_counts, read_model, read_observation_set, write_counts, write_fit_result, write_model, write_observation_set};
use ztpc::theory::{self, BoundInputs, BoundKind};
use ztpc::{fit, make_instance, EstimatorKind, FitSpec, GenConfig, Shape};

/// Low-rank Poisson tensor estimation from zero-inflated counts.
#[derive(Parser)]
#[command(name = "ztpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic truth, trusted set and counts.
    Generate(GenerateArgs),
    /// Fit one estimator to a counts file.
    Fit(FitArgs),
    /// Evaluate closed-form quantities.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Run a sweep over trusted-set fractions and write a CSV summary.
    Experiment(ExperimentArgs),
}

/// Comma-separated list of extents.
#[derive(Clone, Debug)]
struct Dims(Vec<usize>);

fn parse_dims(s: &str) -> Result<Dims, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent '{p}': {e}")))
        .collect::<Result<_, _>>()
        .map(Dims)
}

#[derive(Args)]
struct GenerateArgs {
    /// Comma-separated extents, e.g. 100,100,100.
    #[arg(long, value_parser = parse_dims)]
    dims: Dims,
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    alpha: f64,
    /// Fraction of indices in the trusted set.
    #[arg(long)]
    omega_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    method: EstimatorKind,
    #[arg(long)]
    counts: PathBuf,
    /// Trusted set; defaults to every index.
    #[arg(long)]
    omega: Option<PathBuf>,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Projected-gradient tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Ground-truth model JSON; enables the relative error.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Error amplification factor of the zero-truncated estimator.
    Kappa {
        #[arg(long)]
        beta: f64,
    },
    /// Right-hand side of a squared relative error bound.
    Bound(BoundArgs),
    /// Monte Carlo check of the quadratic KL lower bounds.
    VerifyKl {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct BoundArgs {
    /// ztp_nncp, ztp_cp, poisson_nncp or poisson_cp.
    #[arg(long)]
    kind: BoundKind,
    #[arg(long, value_parser = parse_dims)]
    dims: Dims,
    /// Rank of the truth.
    #[arg(long)]
    rank: usize,
    /// Rank of the estimate; defaults to the truth's.
    #[arg(long)]
    rank_est: Option<usize>,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    omega_size: usize,
    /// Mark bounds of one or more as vacuous.
    #[arg(long)]
    warn_vacuous: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON file mirroring the sweep configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Thread cap; defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Run extents 50, 100 and 200 with 50 replicates each.
    #[arg(long)]
    paper_scale: bool,
}

fn generate(args: GenerateArgs) -> Result<()> {
    let cfg = GenConfig {
        dims: args.dims.0,
        rank: args.rank,
        beta: args.beta,
        alpha: args.alpha,
        seed: args.seed,
    };
    let shape = cfg.shape()?;
    if !(args.omega_frac >= 0.0 && args.omega_frac <= 1.0) {
        bail!("--omega-frac must lie in [0, 1]");
    }
    let size = (args.omega_frac * shape.total() as f64).round() as usize;
    let inst = make_instance(&cfg, size)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_model(args.out.join("truth.json"), &inst.truth)?;
    write_counts(args.out.join("counts.tns"), &inst.counts)?;
    write_observation_set(args.out.join("omega.txt"), &inst.omega)?;
    write_observation_set(args.out.join("gamma.txt"), &inst.gamma)?;
    println!(
        "{}",
        json!({
            "out": args.out,
            "omega_size": inst.omega.len(),
            "nonzeros": inst.counts.nnz(),
        })
    );
    Ok(())
}

fn run_fit(args: FitArgs) -> Result<()> {
    let (omega, counts) = match &args.omega {
        Some(p) => {
            let omega = read_observation_set(p, None)?;
            let counts = read_counts(&args.counts, Some(omega.shape()))?;
            (omega, counts)
        }
        None => {
            let counts = read_counts(&args.counts, None)?;
            (ztpc::ObservationSet::full(counts.shape().clone()), counts)
        }
    };
    let truth = args.truth.as_ref().map(read_model).transpose()?;
    let mut spec = FitSpec::new(args.method, args.rank, args.seed);
    if let Some(n) = args.max_iters {
        spec.optim.max_iters = n;
    }
    if let Some(t) = args.tol {
        spec.optim.grad_tol = t;
    }
    let result = fit(&spec, &counts, &omega, truth.as_ref())?;
    write_fit_result(&args.out, &result)?;
    println!("final_nll: {}", result.final_nll);
    match result.rel_error {
        Some(e) => println!("rel_error: {e}"),
        None => println!("rel_error: n/a"),
    }
    Ok(())
}

fn theory_cmd(cmd: TheoryCommand) -> Result<()> {
    let out = match cmd {
        TheoryCommand::Kappa { beta } => {
            let k = theory::kappa(beta)?;
            json!({ "beta": beta, "kappa": k, "sqrt_kappa": k.sqrt() })
        }
        TheoryCommand::Bound(b) => {
            let shape = Shape::new(b.dims.0)?;
            let inputs = BoundInputs {
                shape: shape.clone(),
                beta: b.beta,
                alpha: b.alpha,
                rank_true: b.rank,
                rank_est: b.rank_est.unwrap_or(b.rank),
                omega_size: b.omega_size,
            };
            let rhs = theory::theorem_bound(&inputs, b.kind)?;
            let mut v = json!({
                "kind": b.kind,
                "bound": rhs,
                "dimension_requirement_met": theory::dimension_requirement_met(&shape),
            });
            if b.warn_vacuous {
                v["vacuous"] = json!(rhs >= 1.0);
            }
            v
        }
        TheoryCommand::VerifyKl {
            beta,
            alpha,
            samples,
            seed,
        } => serde_json::to_value(theory::verify_kl_bounds(beta, alpha, samples, seed)?)?,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn with_suffix(path: &Path, dims: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_I{dims}.{ext}"))
}

/// Returns whether every invariant check passed.
fn experiment(args: ExperimentArgs) -> Result<bool> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    let runs: Vec<(ExperimentConfig, PathBuf)> = if args.paper_scale {
        cfg.paper_scale()
            .into_iter()
            .map(|c| {
                let p = with_suffix(&args.out, c.dims);
                (c, p)
            })
            .collect()
    } else {
        vec![(cfg, args.out.clone())]
    };
    let mut ok = true;
    for (cfg, out) in runs {
        let result = run_sweep(&cfg, args.workers)?;
        emit_csv(&result, &out)?;
        // The script sits next to the CSV and refers to it by name.
        let csv_name = out.file_name().map(PathBuf::from).unwrap_or_else(|| out.clone());
        write_gnuplot_script(&csv_name, out.with_extension("gp"))?;
        let problems = check_invariants(&cfg, &result);
        for p in &problems {
            eprintln!("invariant failed: {p}");
        }
        ok &= problems.is_empty();
        println!("wrote {}", out.display());
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Fit(a) => run_fit(a).map(|_| true),
        Command::Theory(c) => theory_cmd(c).map(|_| true),
        Command::Experiment(a) => experiment(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
