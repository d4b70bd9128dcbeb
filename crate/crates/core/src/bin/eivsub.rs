use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use eivsub::bench::{self, BenchConfig, DataSource, Method};
use eivsub::eiv::{Dataset, ErrorCovariance};
use eivsub::ingest::ColumnSpec;
use eivsub::linalg::SingularPolicy;
use eivsub::rng::stage;
use eivsub::sampling::{self, Criterion, Design, PlanKind};
use eivsub::simgen::{self, CovariateLaw, SimScenario};
use eivsub::subsample::{draw_seeded, weighted_corrected_estimate};
use eivsub::{EivError, Seed};

#[derive(Parser)]
#[command(name = "eivsub", version, about = "Subsampling estimators for regression with covariate measurement error")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate coefficients and standard errors with one method.
    Estimate(EstimateArgs),
    /// Write a sampling plan as CSV.
    Probs(ProbsArgs),
    /// Write a simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Run a benchmark configuration.
    Bench(BenchArgs),
}

#[derive(Args)]
struct DataArgs {
    /// JSON file with a `data` source and optional defaults.
    #[arg(long, conflicts_with = "data")]
    config: Option<PathBuf>,

    /// CSV file to load.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Response column.
    #[arg(long, requires = "data")]
    response: Option<String>,

    /// Comma-separated covariate names.
    #[arg(long, value_delimiter = ',', requires = "data")]
    covariates: Vec<String>,

    /// Replicate columns of a covariate, as NAME=COL1,COL2,...
    #[arg(long = "replicate", requires = "data")]
    replicates: Vec<String>,

    /// Center and scale all variables.
    #[arg(long, requires = "data")]
    standardize: bool,

    /// Add N(0, s) noise to the covariates and correct for it.
    #[arg(long)]
    sigma_u2: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    /// Add a small ridge instead of failing on ill-conditioned systems.
    #[arg(long)]
    ridge_fallback: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,

    #[arg(long)]
    method: Option<Method>,

    #[arg(long)]
    r0: Option<usize>,

    #[arg(long)]
    r: Option<usize>,

    #[arg(long)]
    m: Option<usize>,

    /// Also write the report as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ProbsArgs {
    #[command(flatten)]
    data: DataArgs,

    #[arg(long)]
    design: Design,

    /// Pilot size for residual-based designs.
    #[arg(long, default_value_t = 200)]
    r0: usize,

    /// Subdata size for IBOSS.
    #[arg(long)]
    k: Option<usize>,

    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    Normal,
    T3,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON scenario; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, value_enum)]
    case: Option<CaseArg>,

    #[arg(long)]
    n: Option<usize>,

    #[arg(long)]
    p: Option<usize>,

    #[arg(long)]
    sigma_u2: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,

    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides the configured output path.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Config file accepted by `estimate` and `probs`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    data: DataSource,
    #[serde(default)]
    method: Option<Method>,
    #[serde(default)]
    r0: Option<usize>,
    #[serde(default)]
    r: Option<usize>,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default)]
    sigma_u2: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> eivsub::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| EivError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| EivError::Config(format!("{}: {e}", path.display())))
}

fn parse_replicates(specs: &[String]) -> eivsub::Result<BTreeMap<String, Vec<String>>> {
    specs
        .iter()
        .map(|s| {
            let (name, cols) = s
                .split_once('=')
                .ok_or_else(|| EivError::Config(format!("--replicate expects NAME=COL1,COL2, got {s:?}")))?;
            Ok((name.to_string(), cols.split(',').map(str::to_string).collect()))
        })
        .collect()
}

struct Loaded {
    data: Dataset,
    sigma: ErrorCovariance,
    file: Option<DataConfig>,
    seed: u64,
}

fn load(args: &DataArgs) -> eivsub::Result<Loaded> {
    let (source, file) = match (&args.config, &args.data) {
        (Some(path), _) => {
            let mut cfg: DataConfig = read_config(path)?;
            if let DataSource::Csv { path: csv, .. } = &mut cfg.data {
                if csv.is_relative() {
                    if let Some(dir) = path.parent() {
                        *csv = dir.join(&*csv);
                    }
                }
            }
            (cfg.data.clone(), Some(cfg))
        }
        (None, Some(csv)) => {
            let response = args
                .response
                .clone()
                .ok_or_else(|| EivError::Config("--response is required with --data".into()))?;
            if args.covariates.is_empty() {
                return Err(EivError::Config("--covariates is required with --data".into()));
            }
            let columns = ColumnSpec {
                response,
                covariates: args.covariates.clone(),
                replicate_groups: parse_replicates(&args.replicates)?,
                standardize: args.standardize,
            };
            (DataSource::Csv { path: csv.clone(), columns }, None)
        }
        (None, None) => return Err(EivError::Config("either --config or --data is required".into())),
    };
    let seed = args.seed.or(file.as_ref().and_then(|f| f.seed)).unwrap_or(0);
    let inject = args.sigma_u2.or(file.as_ref().and_then(|f| f.sigma_u2));
    let (data, sigma) = bench::load_source(&source, inject, Seed::new(seed))?;
    Ok(Loaded { data, sigma, file, seed })
}

fn run_estimate(args: &EstimateArgs) -> eivsub::Result<()> {
    let loaded = load(&args.data)?;
    let file = loaded.file.as_ref();
    let method = args.method.or(file.and_then(|f| f.method)).unwrap_or(Method::LOpt);
    let r0 = args.r0.or(file.and_then(|f| f.r0)).unwrap_or(200);
    let r = args.r.or(file.and_then(|f| f.r)).unwrap_or(1000);
    let m = args.m.or(file.and_then(|f| f.m)).unwrap_or(10);
    let policy = if args.data.ridge_fallback {
        SingularPolicy::Ridge
    } else {
        SingularPolicy::Fail
    };
    let report = bench::estimate_report(method, &loaded.data, &loaded.sigma, r0, r, m, Seed::new(loaded.seed), policy)?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let io = |e| EivError::Config(format!("stdout: {e}"));
    writeln!(out, "method {}  n={} p={} r0={} r={}", report.method, report.n, report.p, report.r0, report.r).map_err(io)?;
    let se = report.std_errors();
    writeln!(out, "{:>5}  {:>14}  {:>14}", "coef", "estimate", "std.error").map_err(io)?;
    for (j, b) in report.beta.iter().enumerate() {
        let s = se.as_ref().map_or("NA".to_string(), |s| format!("{:.6e}", s[j]));
        writeln!(out, "{j:>5}  {b:>14.6e}  {s:>14}").map_err(io)?;
    }
    if let Some(path) = &args.output {
        let json = serde_json::to_string_pretty(&report).map_err(|e| EivError::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| EivError::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_probs(args: &ProbsArgs) -> eivsub::Result<()> {
    let loaded = load(&args.data)?;
    let (data, sigma) = (&loaded.data, &loaded.sigma);
    let seed = Seed::new(loaded.seed);
    let pilot = |corrected: bool| -> eivsub::Result<nalgebra::DVector<f64>> {
        let draws = draw_seeded(&sampling::uniform_probs(data.n())?, args.r0, seed.derive(stage::PILOT))?;
        let s = if corrected { sigma.clone() } else { ErrorCovariance::zero(data.p()) };
        Ok(weighted_corrected_estimate(&draws, data, &s)?.beta)
    };
    let plan = match args.design {
        Design::Uniform => sampling::uniform_probs(data.n())?,
        Design::Leverage => sampling::leverage_probs(data)?,
        Design::MV => sampling::optimal_probs_mv(data, &pilot(true)?, sigma)?,
        Design::MVc => sampling::optimal_probs_mvc(data, &pilot(true)?)?,
        Design::UncorrectedMV => sampling::uncorrected_variant(Criterion::MV, data, &pilot(false)?)?,
        Design::UncorrectedMVc => sampling::uncorrected_variant(Criterion::MVc, data, &pilot(false)?)?,
        Design::Iboss => {
            let k = args
                .k
                .ok_or_else(|| EivError::Config("--k is required for IBOSS".into()))?;
            sampling::iboss_select(data, k)?
        }
    };
    let mut wtr = csv::Writer::from_path(&args.output)?;
    match plan.kind() {
        PlanKind::Probabilistic(probs) => {
            wtr.write_record(["index", "prob"])?;
            for (i, p) in probs.iter().enumerate() {
                wtr.write_record([i.to_string(), p.to_string()])?;
            }
        }
        PlanKind::Deterministic(idx) => {
            wtr.write_record(["index"])?;
            for i in idx {
                wtr.write_record([i.to_string()])?;
            }
        }
    }
    wtr.flush().map_err(|e| EivError::Config(format!("{}: {e}", args.output.display())))?;
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> eivsub::Result<()> {
    let mut s = match &args.config {
        Some(path) => read_config::<SimScenario>(path)?,
        None => SimScenario::case1(0.4, 0),
    };
    if let Some(c) = args.case {
        s.case = match c {
            CaseArg::Normal => CovariateLaw::Normal,
            CaseArg::T3 => CovariateLaw::StudentT3,
        };
    }
    if let Some(n) = args.n {
        s.n = n;
    }
    if let Some(p) = args.p {
        s.p = p;
        s.beta_true = None;
    }
    if let Some(v) = args.sigma_u2 {
        s.sigma_u2 = v;
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    let g = simgen::generate(&s)?;
    let p = s.p;
    let mut wtr = csv::Writer::from_path(&args.output)?;
    let mut header = vec!["y".to_string()];
    header.extend((1..=p).map(|j| format!("w{j}")));
    header.extend((1..=p).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for i in 0..s.n {
        let mut row = vec![g.dataset.y()[i].to_string()];
        row.extend((0..p).map(|j| g.dataset.w()[(i, j)].to_string()));
        row.extend((0..p).map(|j| g.x_true[(i, j)].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| EivError::Config(format!("{}: {e}", args.output.display())))?;
    Ok(())
}

fn run_bench(args: &BenchArgs) -> eivsub::Result<()> {
    let mut cfg = BenchConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    let records = bench::run_experiment(&cfg)?;
    match args.output.as_ref().or(cfg.output_path.as_ref()) {
        Some(path) => bench::write_results(&records, path),
        None => bench::write_results_to(&records, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .init();
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Estimate(a) => run_estimate(a),
        Command::Probs(a) => run_probs(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
