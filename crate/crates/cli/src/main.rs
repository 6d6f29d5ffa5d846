use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use homodrift_core::estimate::{solve_estimator, BasisMode, FemSettings};
use homodrift_core::filterbank::filter_recurrent;
use homodrift_core::harness::{
    homogenized_of, run_experiment, simulate_config, table1_protocol, DeltaSpec, ExperimentResult,
};
use homodrift_core::homogenize::cell_problem;
use homodrift_core::io::{read_observations, write_atomic, write_observations};
use homodrift_core::spectral::{assemble, build_mesh, solve_eigenpairs, DEFAULT_PANELS_PER_ELEMENT};
use homodrift_core::{
    BetaFamily, EigenBasis, ExperimentConfig, FastPotential, ObservationSet, RunOptions, ScoreContext, ScoreSettings,
    SlowPotential, SolverOptions,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "homodrift", version, about = "Drift estimation for homogenized Langevin dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Effective coefficient K and the homogenized drift and diffusion.
    Homogenize(HomogenizeArgs),
    /// Simulate the model of an experiment config and write observations.
    Simulate(SimulateArgs),
    /// Append the exponential filter to an observation file.
    Filter(FilterArgs),
    /// Finite-element eigenpairs of the homogenized generator.
    Spectrum(SpectrumArgs),
    /// Solve the martingale estimating equation for one observation file.
    Estimate(EstimateArgs),
    /// Run a replicated experiment grid.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct HomogenizeArgs {
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value = "cos")]
    fast: FastPotential,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long = "n-quad", default_value_t = homodrift_core::homogenize::DEFAULT_N_QUAD)]
    n_quad: usize,
    /// Slow drift coefficients, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    alpha: Vec<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Horizon; defaults to the config's `T`.
    #[arg(long = "T")]
    t: Option<f64>,
    /// Observation spacing `epsilon^zeta`.
    #[arg(long = "delta-exp", conflicts_with = "delta")]
    delta_exp: Option<f64>,
    /// Absolute observation spacing.
    #[arg(long)]
    delta: Option<f64>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the filtered series.
    #[arg(long)]
    filtered: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Spacing; must match the file's `t` column when given.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Experiment config supplying the slow potential and the homogenized diffusion.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Slow potential, used without `--config`.
    #[arg(long, default_value = "quadratic")]
    slow: SlowPotential,
    /// Homogenized diffusion, used without `--config`.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

impl ModelArgs {
    fn resolve(&self) -> Result<(SlowPotential, f64)> {
        match &self.config {
            Some(p) => {
                let cfg = ExperimentConfig::load(p)?;
                let (hm, _) = homogenized_of(&cfg)?;
                Ok((hm.slow().clone(), hm.sigma()))
            }
            None => Ok((self.slow.clone(), self.sigma)),
        }
    }
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    a: Vec<f64>,
    #[arg(long = "J", default_value_t = 3)]
    j: usize,
    #[arg(long, default_value_t = homodrift_core::spectral::DEFAULT_H)]
    h: f64,
    #[arg(long = "R-floor", default_value_t = homodrift_core::spectral::DEFAULT_R_FLOOR)]
    r_floor: f64,
    /// Writes the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Auto,
    Fem,
    Analytic,
}

impl From<BasisArg> for BasisMode {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Auto => BasisMode::Auto,
            BasisArg::Fem => BasisMode::Fem,
            BasisArg::Analytic => BasisMode::Analytic,
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    obs: PathBuf,
    /// Use the filtered series as the weight argument.
    #[arg(long)]
    filtered: bool,
    #[arg(long = "J", default_value_t = 1)]
    j: usize,
    /// `identity`, `mono:k`, `list:x^3,x` or `poly:[c0,c1,..];..`.
    #[arg(long, default_value = "identity")]
    beta: String,
    #[arg(long)]
    slow: Option<SlowPotential>,
    /// Known homogenized diffusion.
    #[arg(long = "sigma-known")]
    sigma_known: f64,
    #[arg(long, value_delimiter = ',')]
    a0: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "auto")]
    basis: BasisArg,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Seed of the input data, recorded for provenance.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Table1,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, required_unless_present = "protocol")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "config")]
    protocol: Option<Protocol>,
    /// Scale parameters for the protocol run.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.05")]
    epsilons: Vec<f64>,
    #[arg(long = "n-rep")]
    n_rep: Option<usize>,
    /// Use the config's `T_full` horizon.
    #[arg(long = "full-scale")]
    full_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Homogenize(a) => homogenize(a)?,
        Command::Simulate(a) => simulate(a)?,
        Command::Filter(a) => filter(a)?,
        Command::Spectrum(a) => spectrum(a)?,
        Command::Estimate(a) => estimate(a)?,
        Command::Experiment(a) => return experiment(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn homogenize(args: HomogenizeArgs) -> Result<()> {
    let fast = match args.period {
        Some(l) => FastPotential::new(args.fast.kind(), Some(l))?,
        None => args.fast,
    };
    let r = cell_problem(&fast, args.sigma, args.n_quad)?;
    let a: Vec<f64> = args.alpha.iter().map(|x| r.k * x).collect();
    let out = serde_json::json!({
        "K": r.k,
        "A": a,
        "Sigma": r.k * args.sigma,
        "L": fast.period(),
        "C_sigma": r.c_sigma,
        "C_hat_sigma": r.c_hat_sigma,
        "n_quad": args.n_quad,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(t) = args.t {
        cfg.t = t;
    }
    if let Some(z) = args.delta_exp {
        cfg.sampling.delta = DeltaSpec::Zeta(vec![z]);
    } else if let Some(d) = args.delta {
        cfg.sampling.delta = DeltaSpec::Absolute(vec![d]);
    }
    let seed = args.seed.unwrap_or(cfg.master_seed);
    let (obs, h) = simulate_config(&cfg, seed, args.filtered)?;
    write_observations(&obs, &args.out)?;
    eprintln!("wrote {} observations (delta {}, fine step {h}, seed {seed}) to {}", obs.len(), obs.delta(), args.out.display());
    Ok(())
}

fn filter(args: FilterArgs) -> Result<()> {
    let obs = read_observations(&args.input)?;
    if let Some(d) = args.delta {
        ensure!(
            (d - obs.delta()).abs() <= 1e-9 * d.abs().max(1.0),
            "given spacing {d} differs from the file's spacing {}",
            obs.delta()
        );
    }
    let dim = obs.dim();
    let mut z = vec![0.0; obs.x().len()];
    for i in 0..dim {
        for (n, v) in filter_recurrent(&obs.coordinate(i), obs.delta()).into_iter().enumerate() {
            z[n * dim + i] = v;
        }
    }
    let out = ObservationSet::new(obs.x().to_vec(), dim, obs.delta(), Some(z))?;
    write_observations(&out, &args.out)?;
    Ok(())
}

fn spectrum(args: SpectrumArgs) -> Result<()> {
    let (slow, sigma) = args.model.resolve()?;
    let mesh = build_mesh(None, args.h, args.r_floor)?;
    let w = assemble(&mesh, &args.a, sigma, &slow, DEFAULT_PANELS_PER_ELEMENT)?;
    let b = solve_eigenpairs(&w, args.j)?;
    let mut s = String::new();
    writeln!(s, "# potential={slow} a={:?} Sigma={sigma} R={} h={}", args.a, mesh.r, mesh.h)?;
    for j in 1..=args.j {
        writeln!(s, "# lambda_{j}={}", b.lambda(j))?;
    }
    let header: Vec<String> = (1..=args.j).map(|j| format!("phi_{j}")).collect();
    writeln!(s, "x,{}", header.join(","))?;
    for (i, x) in mesh.nodes().iter().enumerate() {
        let row: Vec<String> = (1..=args.j).map(|j| b.theta(j)[i].to_string()).collect();
        writeln!(s, "{x},{}", row.join(","))?;
    }
    emit(&s, args.out.as_deref())
}

#[derive(Serialize)]
struct EstimateReport {
    #[serde(flatten)]
    result: homodrift_core::EstimatorResult,
    filtered: bool,
    #[serde(rename = "J")]
    j: usize,
    beta: String,
    slow: String,
    sigma: f64,
    a0: Vec<f64>,
    basis: &'static str,
    mesh: homodrift_core::Mesh,
    fem: FemSettings,
    n_obs: usize,
    delta: f64,
    seed: Option<u64>,
    source: PathBuf,
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let obs = read_observations(&args.obs)?;
    let obs = if args.filtered && obs.z().is_none() { obs.with_filter() } else { obs };
    let slow = args.slow.unwrap_or_else(SlowPotential::quadratic);
    let beta = BetaFamily::parse(&args.beta, args.j)?;
    let settings =
        ScoreSettings::new(slow.clone(), args.sigma_known, beta).filtered(args.filtered).basis(args.basis.into());
    let ctx = ScoreContext::new(&obs, settings)?;
    let a0 = args.a0.unwrap_or_else(|| vec![1.0; slow.dim()]);
    let opts = SolverOptions { tol_score: args.tol, ..SolverOptions::default() };
    let result = solve_estimator(&ctx, &a0, &opts)?;
    let converged = result.converged;
    let report = EstimateReport {
        result,
        filtered: args.filtered,
        j: args.j,
        beta: args.beta,
        slow: slow.to_string(),
        sigma: args.sigma_known,
        a0,
        basis: if ctx.uses_analytic_basis() { "analytic" } else { "fem" },
        mesh: ctx.mesh().clone(),
        fem: ctx.settings().fem,
        n_obs: obs.n_intervals(),
        delta: obs.delta(),
        seed: args.seed,
        source: args.obs,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    emit(&json, args.out.as_deref())?;
    if !converged {
        log::warn!("no root within tolerance; score norm {}", report.result.score_norm);
    }
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn print_summary(res: &ExperimentResult) {
    println!("# {} (K = {:.6}, truth {:?})", res.config.name, res.k, res.truth);
    println!("{:>10} {:>8} {:>4} {:>7} {:>16} {:>28} {:>6} {:>5}", "delta", "zeta", "J", "N", "estimator", "mean", "fail", "flag");
    for s in &res.summaries {
        let k = &s.key;
        let mean: Vec<String> = s.mean.iter().map(|m| format!("{m:.4}")).collect();
        println!(
            "{:>10.4e} {:>8} {:>4} {:>7} {:>16} {:>28} {:>6} {:>5}",
            k.delta,
            k.zeta.map_or("-".into(), |z| z.to_string()),
            k.j.map_or("-".into(), |j| j.to_string()),
            k.n_obs,
            k.estimator.name(),
            mean.join(", "),
            s.n_fail,
            if s.flagged { "yes" } else { "" }
        );
    }
}

fn experiment(args: ExperimentArgs) -> Result<ExitCode> {
    let opts = RunOptions { threads: args.threads, full_scale: args.full_scale };
    let mut flagged = false;
    match (args.protocol, &args.config) {
        (Some(Protocol::Table1), _) => {
            let dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("results/table1"));
            let (results, rows) = table1_protocol(&args.epsilons, args.n_rep.unwrap_or(15), args.seed.unwrap_or(0), opts)?;
            for r in &results {
                r.write(&dir, &r.config.name)?;
                flagged |= r.any_flagged();
            }
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            let mut csv = String::from("epsilon,n_obs,error_of_mean,median_error,mean_error,mean_1,mean_2,n_fail\n");
            for r in &rows {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    r.epsilon,
                    r.n_obs,
                    opt(r.error_of_mean),
                    opt(r.median_error),
                    opt(r.mean_error),
                    r.mean[0],
                    r.mean[1],
                    r.n_fail
                )?;
            }
            write_atomic(&dir.join("table1.csv"), csv.as_bytes())?;
            print!("{csv}");
        }
        (None, Some(path)) => {
            let mut cfg = ExperimentConfig::load(path)?;
            if let Some(s) = args.seed {
                cfg.master_seed = s;
            }
            if let Some(n) = args.n_rep {
                cfg.n_rep = n;
            }
            let res = run_experiment(&cfg, opts)?;
            let dir = args
                .out_dir
                .clone()
                .or_else(|| cfg.output.dir.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let stem = cfg.output.stem.clone().unwrap_or_else(|| cfg.name.clone());
            let (json, csv) = res.write(&dir, &stem)?;
            print_summary(&res);
            eprintln!("wrote {} and {}", json.display(), csv.display());
            flagged = res.any_flagged();
        }
        (None, None) => bail!("either --config or --protocol is required"),
    }
    if flagged {
        eprintln!("at least one grid point has a majority of failed replications");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
