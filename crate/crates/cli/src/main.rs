//! `mipsbench`: sweeps, oracle checks, SLOPE demo, and bootstrap CDFs.
//!
//! Exit codes: 0 success; 1 configuration or I/O error; 2 when more than
//! half of the seeds failed for some (estimator, value) cell, or when an
//! oracle check fails.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mips_core::harness::{
    bootstrap_cdf, emit_report, run_replications, BootstrapSpec, EstimationOptions, EstimatorKind,
    ExperimentReport, SweepParam, SweepSpec,
};
use mips_core::models::PosteriorHyper;
use mips_core::oracle::{run_oracle_checks, CheckVerdict, OracleCheckConfig};
use mips_core::rng::{stream_rng, Stream};
use mips_core::slope::SearchSpace;
use mips_core::synth::{build_environment, SyntheticConfig};

#[derive(Parser)]
#[command(
    name = "mipsbench",
    version,
    about = "Off-policy estimator benchmarks with action embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicate estimators over a grid of one environment parameter.
    Sweep(SweepArgs),
    /// Check the analytic bias/variance identities on random tabular instances.
    OracleCheck(OracleArgs),
    /// MIPS on all embedding dims vs SLOPE-selected dims, across sample sizes.
    SlopeDemo(SlopeArgs),
    /// Bootstrap CDF of squared error relative to IPS.
    BootstrapCdf(BootstrapArgs),
}

/// Synthetic environment overrides; unset fields keep their defaults.
#[derive(Args, Clone, Default)]
struct EnvArgs {
    #[arg(long)]
    num_actions: Option<usize>,
    #[arg(long)]
    context_dim: Option<usize>,
    #[arg(long)]
    embed_dims: Option<usize>,
    #[arg(long)]
    embed_cardinality: Option<usize>,
    /// Logging policy inverse temperature.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    /// Target policy exploration rate.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Reward noise standard deviation.
    #[arg(long, alias = "sigma")]
    reward_noise: Option<f64>,
    #[arg(long, alias = "num-deficient")]
    num_deficient_actions: Option<usize>,
    /// Embedding dims present in the data but hidden from estimators.
    #[arg(long, value_delimiter = ',', conflicts_with = "withheld_count")]
    withheld_dims: Option<Vec<usize>>,
    /// Hide the last k embedding dims.
    #[arg(long)]
    withheld_count: Option<usize>,
    /// Load the base environment from a JSON file before applying flags.
    #[arg(long)]
    env_config: Option<PathBuf>,
}

impl EnvArgs {
    fn build(&self, seed: u64, defaults: SyntheticConfig) -> Result<SyntheticConfig> {
        let mut cfg = match &self.env_config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => defaults,
        };
        cfg.seed = seed;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { cfg.$f = v; })* };
        }
        set!(
            num_actions,
            context_dim,
            embed_dims,
            embed_cardinality,
            beta,
            epsilon,
            reward_noise,
            num_deficient_actions,
            withheld_dims
        );
        if let Some(k) = self.withheld_count {
            cfg.withhold_last(k)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct EstimationArgs {
    /// Cross-fitting folds for reward models.
    #[arg(long, default_value_t = 2)]
    folds: usize,
    /// SLOPE confidence level parameter.
    #[arg(long, default_value_t = mips_core::slope::DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, value_enum, default_value_t = Search::Greedy)]
    search: Search,
    /// Action-posterior ridge penalty.
    #[arg(long, default_value_t = 1e-2)]
    posterior_l2: f64,
    #[arg(long, default_value_t = 500)]
    posterior_max_iters: usize,
}

impl EstimationArgs {
    fn options(&self) -> EstimationOptions {
        let defaults = EstimationOptions::default();
        EstimationOptions {
            folds: self.folds,
            delta: self.delta,
            search: match self.search {
                Search::Greedy => SearchSpace::Greedy,
                Search::Exhaustive => SearchSpace::Exhaustive,
            },
            posterior: PosteriorHyper {
                l2: self.posterior_l2,
                max_iters: self.posterior_max_iters,
                ..defaults.posterior
            },
            ..defaults
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Search {
    Greedy,
    Exhaustive,
}

#[derive(Args)]
struct SweepArgs {
    /// Swept parameter: num_actions, n, num_deficient, withheld_count, beta, epsilon, sigma.
    #[arg(long)]
    param: String,
    /// Comma-separated values; defaults to the desk grid of the parameter.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Option<Vec<f64>>,
    /// Use the full experiment grid and 100 replications by default.
    #[arg(long)]
    full_grid: bool,
    #[arg(long, default_value = "dm,ips,dr,mips-true")]
    estimators: String,
    /// Replications per value (default 50, or 100 with --full-grid).
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 12345)]
    seed: u64,
    /// Logged sample size when n is not swept.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Contexts for the Monte-Carlo ground truth.
    #[arg(long, default_value_t = 1_000_000)]
    ground_truth_contexts: usize,
    /// Draw a fresh environment for every seed.
    #[arg(long)]
    resample_environment: bool,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = OracleCheckConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = OracleCheckConfig::default().instances)]
    instances: usize,
    #[arg(long, default_value_t = OracleCheckConfig::default().simulation_reps)]
    simulation_reps: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightSource {
    /// Weights from the fitted action posterior.
    Estimated,
    /// Exact marginal weights from the environment.
    True,
}

#[derive(Args)]
struct SlopeArgs {
    /// Sample sizes; defaults to the desk grid.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long)]
    full_grid: bool,
    #[arg(long, value_enum, default_value_t = WeightSource::True)]
    weights: WeightSource,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value_t = 12345)]
    seed: u64,
    #[arg(long, default_value_t = 1_000_000)]
    ground_truth_contexts: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long, default_value = "dm,ips,dr,mips-true")]
    estimators: String,
    /// Resample size.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Size of the logged dataset resampled from (defaults to n).
    #[arg(long)]
    logged_size: Option<usize>,
    /// Size of the on-policy dataset defining the reference value.
    #[arg(long, default_value_t = 100_000)]
    on_policy_size: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 12345)]
    seed: u64,
    /// Output CSV with columns estimator,rank,rel_se.
    #[arg(long, default_value = "bootstrap.csv")]
    out: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
}

fn desk_grid(param: SweepParam, full: bool) -> Vec<f64> {
    let v: &[f64] = match (param, full) {
        (SweepParam::NumActions, false) => &[10.0, 100.0, 1000.0],
        (SweepParam::NumActions, true) => &[10.0, 100.0, 500.0, 1000.0, 2000.0, 5000.0],
        (SweepParam::N, false) => &[800.0, 3200.0, 12800.0],
        (SweepParam::N, true) => &[800.0, 1600.0, 3200.0, 6400.0, 12800.0, 25600.0],
        (SweepParam::NumDeficient, false) => &[0.0, 500.0, 900.0],
        (SweepParam::NumDeficient, true) => &[0.0, 100.0, 300.0, 500.0, 700.0, 900.0],
        (SweepParam::WithheldCount, false) => &[0.0, 10.0, 18.0],
        (SweepParam::WithheldCount, true) => {
            &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0]
        }
        (SweepParam::Beta, _) => &[-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0],
        (SweepParam::Epsilon, _) => &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        (SweepParam::Sigma, _) => &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
    };
    v.to_vec()
}

/// The 20-dim binary embedding used by the withheld-dims and SLOPE experiments.
fn binary_embedding_defaults() -> SyntheticConfig {
    SyntheticConfig {
        embed_dims: 20,
        embed_cardinality: 2,
        ..SyntheticConfig::default()
    }
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{:<16} {:>10} {:>14} {:>14} {:>14} {:>7}",
        "estimator",
        report.spec.param.name(),
        "mse",
        "squared_bias",
        "variance",
        "failed"
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "-".into());
    for c in &report.cells {
        println!(
            "{:<16} {:>10} {:>14} {:>14} {:>14} {:>7}",
            c.estimator.name(),
            c.value,
            fmt(c.mse),
            fmt(c.squared_bias),
            fmt(c.variance),
            c.failed()
        );
    }
}

/// Runs a sweep, writes the report, and returns whether the failure
/// threshold was exceeded.
fn run_sweep(spec: &SweepSpec, out: Option<&Path>) -> Result<bool> {
    spec.validate()?;
    let report = run_replications(spec)?;
    print_report(&report);
    if let Some(out) = out {
        let manifest = emit_report(&report, out)?;
        eprintln!("wrote {} and {}", out.display(), manifest.display());
    }
    for c in report
        .cells
        .iter()
        .filter(|c| c.exceeds_failure_threshold())
    {
        eprintln!(
            "{} at {}={}: {} of {} seeds failed",
            c.estimator,
            c.param,
            c.value,
            c.failed(),
            c.seeds.len()
        );
    }
    Ok(report.exceeds_failure_threshold())
}

fn sweep(args: &SweepArgs) -> Result<bool> {
    let param: SweepParam = args.param.parse()?;
    let defaults = if param == SweepParam::WithheldCount && args.env.embed_dims.is_none() {
        binary_embedding_defaults()
    } else {
        SyntheticConfig::default()
    };
    let base = args.env.build(args.seed, defaults)?;
    let roster = EstimatorKind::parse_list(&args.estimators)?;
    let values = args
        .values
        .clone()
        .unwrap_or_else(|| desk_grid(param, args.full_grid));
    let mut spec = SweepSpec::new(base, param, values, roster);
    spec.reps = args.reps.unwrap_or(if args.full_grid { 100 } else { 50 });
    spec.n = args.n;
    spec.ground_truth_contexts = args.ground_truth_contexts;
    spec.resample_environment = args.resample_environment;
    spec.estimation = args.estimation.options();
    run_sweep(&spec, Some(&args.out))
}

fn slope_demo(args: &SlopeArgs) -> Result<bool> {
    let base = args.env.build(args.seed, binary_embedding_defaults())?;
    let roster = match args.weights {
        WeightSource::True => vec![EstimatorKind::MipsTrue, EstimatorKind::MipsTrueSlope],
        WeightSource::Estimated => vec![EstimatorKind::Mips, EstimatorKind::MipsSlope],
    };
    let values = args
        .values
        .clone()
        .unwrap_or_else(|| desk_grid(SweepParam::N, args.full_grid));
    let mut spec = SweepSpec::new(base, SweepParam::N, values, roster);
    spec.reps = args.reps;
    spec.ground_truth_contexts = args.ground_truth_contexts;
    spec.estimation = args.estimation.options();
    run_sweep(&spec, args.out.as_deref())
}

fn oracle_check(args: &OracleArgs) -> Result<bool> {
    let cfg = OracleCheckConfig {
        seed: args.seed,
        instances: args.instances,
        simulation_reps: args.simulation_reps,
        ..OracleCheckConfig::default()
    };
    let outcomes = run_oracle_checks(&cfg)?;
    let mut failed = false;
    for o in &outcomes {
        let tag = match o.verdict {
            CheckVerdict::Pass => "pass",
            CheckVerdict::Fail => {
                failed = true;
                "FAIL"
            }
            CheckVerdict::Refuted => "refuted",
        };
        println!("{tag:<8} {:<44} {}", o.name, o.detail);
    }
    Ok(failed)
}

fn bootstrap(args: &BootstrapArgs) -> Result<bool> {
    let cfg = args.env.build(args.seed, SyntheticConfig::default())?;
    let env = build_environment(&cfg)?;
    let logged_size = args.logged_size.unwrap_or(args.n);
    if logged_size == 0 || args.on_policy_size == 0 {
        bail!("dataset sizes must be at least 1");
    }
    let logged =
        env.sample_logged_data(logged_size, &mut stream_rng(args.seed, Stream::Data, 0))?;
    let on_policy = env.sample_on_policy(
        args.on_policy_size,
        &mut stream_rng(args.seed, Stream::OnPolicy, 0),
    )?;
    let spec = BootstrapSpec {
        roster: EstimatorKind::parse_list(&args.estimators)?,
        n: args.n,
        reps: args.reps,
        seed: args.seed,
        estimation: args.estimation.options(),
    };
    let result = bootstrap_cdf(&env, &on_policy, &logged, &spec)?;
    let file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "estimator,rank,rel_se")?;
    for cdf in &result.estimators {
        for (i, v) in cdf.rel_se.iter().enumerate() {
            writeln!(w, "{},{i},{v}", cdf.estimator)?;
        }
    }
    w.flush()
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("on-policy value {}", result.on_policy_value);
    println!(
        "{:<16} {:>6} {:>10} {:>10} {:>7}",
        "estimator", "kept", "F(1)", "median", "failed"
    );
    for cdf in &result.estimators {
        let median = cdf
            .rel_se
            .get(cdf.rel_se.len() / 2)
            .copied()
            .unwrap_or(f64::NAN);
        println!(
            "{:<16} {:>6} {:>10.4} {:>10.4} {:>7}",
            cdf.estimator.name(),
            cdf.rel_se.len(),
            cdf.cdf(1.0),
            median,
            cdf.failures.len()
        );
    }
    if !result.excluded.is_empty() {
        eprintln!(
            "{} resamples excluded (IPS error exactly 0 or IPS failed)",
            result.excluded.len()
        );
    }
    let kept = args.reps - result.excluded.len();
    Ok(result
        .estimators
        .iter()
        .any(|c| 2 * c.failures.len() > kept))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Sweep(a) => sweep(a),
        Command::OracleCheck(a) => oracle_check(a),
        Command::SlopeDemo(a) => slope_demo(a),
        Command::BootstrapCdf(a) => bootstrap(a),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
