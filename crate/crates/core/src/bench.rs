//! Monte Carlo and timing harness.
//!
//! A [`BenchConfig`] names a data source (simulated or CSV), a list of
//! methods and a grid of subsample sizes. [`run_mse_experiment`] estimates
//! `E‖β̃ − β‖²` for every (method, r) cell over independent replications;
//! [`run_timing_experiment`] reports median wall-clock time per call.
//! Output is a flat CSV, one row per cell, identical across thread counts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eiv::{
    estimate_sigma_uu, full_asymptotic_covariance, full_corrected_estimate, full_corrected_estimate_with,
    noise_variance_plugin, Dataset, ErrorCovariance,
};
use crate::error::{EivError, Result};
use crate::ingest::{inject_error, load_csv, ColumnSpec};
use crate::linalg::{CompensatedSum, SingularPolicy};
use crate::perturbation::{cleps_estimate, cleps_estimate_with, ClepsOptions};
use crate::rng::{stage, Seed};
use crate::sampling::{iboss_select, leverage_probs, uniform_probs, Criterion};
use crate::simgen::{generate_observed, SimScenario};
use crate::subsample::{
    draw_seeded, plugin_covariance, subsample_estimate, two_step_estimate_with, weighted_corrected_estimate_with,
    TwoStepOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "UNIF")]
    Unif,
    #[serde(rename = "BLEV")]
    Blev,
    #[serde(rename = "IBOSS")]
    Iboss,
    #[serde(rename = "A-Opt")]
    AOpt,
    #[serde(rename = "L-Opt")]
    LOpt,
    #[serde(rename = "CLEPS")]
    Cleps,
    #[serde(rename = "UA-Opt")]
    UaOpt,
    #[serde(rename = "UL-Opt")]
    UlOpt,
    #[serde(rename = "UCLEPS")]
    Ucleps,
    #[serde(rename = "FULL")]
    Full,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Unif,
        Method::Blev,
        Method::Iboss,
        Method::AOpt,
        Method::LOpt,
        Method::Cleps,
        Method::UaOpt,
        Method::UlOpt,
        Method::Ucleps,
        Method::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Unif => "UNIF",
            Method::Blev => "BLEV",
            Method::Iboss => "IBOSS",
            Method::AOpt => "A-Opt",
            Method::LOpt => "L-Opt",
            Method::Cleps => "CLEPS",
            Method::UaOpt => "UA-Opt",
            Method::UlOpt => "UL-Opt",
            Method::Ucleps => "UCLEPS",
            Method::Full => "FULL",
        }
    }

    /// Ignores measurement error (Σuu treated as zero).
    pub fn is_uncorrected(self) -> bool {
        matches!(self, Method::UaOpt | Method::UlOpt | Method::Ucleps)
    }

    /// Averages m perturbation replicates.
    pub fn uses_m(self) -> bool {
        matches!(self, Method::Cleps | Method::Ucleps)
    }

    /// Pilot of r0 draws followed by r optimal draws. Every other subsampling
    /// method receives the same total budget r0 + r in one go.
    pub fn is_two_step(self) -> bool {
        matches!(self, Method::AOpt | Method::LOpt | Method::UaOpt | Method::UlOpt)
    }

    fn ordinal(self) -> u64 {
        Method::ALL.iter().position(|&m| m == self).unwrap() as u64
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = EivError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| EivError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    #[default]
    Mse,
    Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulate { scenario: SimScenario },
    Csv { path: PathBuf, columns: ColumnSpec },
}

fn default_m() -> usize {
    10
}

fn default_timing_repeats() -> usize {
    5
}

/// Experiment description, read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub experiment: Experiment,
    pub data: DataSource,
    pub methods: Vec<Method>,
    pub r0: usize,
    pub r_list: Vec<usize>,
    /// Perturbation replicates for CLEPS/UCLEPS.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Sweep over m instead of the single `m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_list: Option<Vec<usize>>,
    /// Simulated data: overrides the scenario's σu². CSV data: levels of
    /// synthetic error injected into the (standardized) covariates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_u2_list: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_list: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r0_list: Option<Vec<usize>>,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    #[serde(default = "default_timing_repeats")]
    pub timing_repeats: usize,
    /// Uniform mixing applied to the optimal plans.
    #[serde(default)]
    pub pi_floor: f64,
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BenchConfig = serde_json::from_str(text).map_err(|e| EivError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative CSV path is taken relative to the
    /// config file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EivError::io(path, e))?;
        let mut cfg = BenchConfig::from_json(&text)?;
        if let DataSource::Csv { path: csv, .. } = &mut cfg.data {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(EivError::Config(msg));
        if self.methods.is_empty() {
            return fail("methods must be nonempty".into());
        }
        if self.r_list.is_empty() || self.r_list.contains(&0) {
            return fail("r_list must be nonempty with every entry ≥ 1".into());
        }
        if self.replications == 0 {
            return fail("replications must be at least 1".into());
        }
        if self.m_values().contains(&0) {
            return fail("m must be at least 1".into());
        }
        if self.experiment == Experiment::Timing && self.timing_repeats < 5 {
            return fail("timing_repeats must be at least 5".into());
        }
        if self.r0_values().is_empty() {
            return fail("r0_list must be nonempty".into());
        }
        if let Some(levels) = &self.sigma_u2_list {
            if levels.is_empty() || levels.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                return fail("sigma_u2_list entries must be finite and ≥ 0".into());
            }
        }
        if let DataSource::Csv { .. } = self.data {
            if self.n_list.is_some() || self.p_list.is_some() {
                return fail("n_list and p_list apply to simulated data only".into());
            }
        }
        if !(0.0..=1.0).contains(&self.pi_floor) {
            return fail("pi_floor must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn m_values(&self) -> Vec<usize> {
        self.m_list.clone().unwrap_or_else(|| vec![self.m])
    }

    fn r0_values(&self) -> Vec<usize> {
        self.r0_list.clone().unwrap_or_else(|| vec![self.r0])
    }

    fn scenarios(&self, base: &SimScenario) -> Vec<SimScenario> {
        let ns = self.n_list.clone().unwrap_or_else(|| vec![base.n]);
        let ps = self.p_list.clone().unwrap_or_else(|| vec![base.p]);
        let s2 = self.sigma_u2_list.clone().unwrap_or_else(|| vec![base.sigma_u2]);
        let mut out = Vec::new();
        for &n in &ns {
            for &p in &ps {
                for &sigma_u2 in &s2 {
                    let mut s = base.clone();
                    s.n = n;
                    s.p = p;
                    s.sigma_u2 = sigma_u2;
                    if self.p_list.is_some() && s.beta_true.as_ref().is_some_and(|b| b.len() != p) {
                        s.beta_true = None;
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        let r0s = self.r0_values();
        for (k, &r0) in r0s.iter().enumerate() {
            for &method in &self.methods {
                if method == Method::Full {
                    if k == 0 {
                        cells.push(Cell { method, r0: 0, r: 0, m: None });
                    }
                    continue;
                }
                for &r in &self.r_list {
                    if method.uses_m() {
                        for m in self.m_values() {
                            cells.push(Cell { method, r0, r, m: Some(m) });
                        }
                    } else {
                        cells.push(Cell { method, r0, r, m: None });
                    }
                }
            }
        }
        cells
    }
}

/// One output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: Method,
    pub n: usize,
    pub p: usize,
    pub sigma_u2: f64,
    pub r0: usize,
    pub r: usize,
    pub m: Option<usize>,
    pub mse: Option<f64>,
    pub log10_mse: Option<f64>,
    /// Replications (or timing repeats) that hit a numerical failure.
    pub failures: usize,
    /// Median seconds per call in timing runs; empty in MSE runs.
    pub mean_wall_time_s: Option<f64>,
}

pub const RECORD_COLUMNS: [&str; 11] = [
    "method",
    "n",
    "p",
    "sigma_u2",
    "r0",
    "r",
    "m",
    "mse",
    "log10_mse",
    "failures",
    "mean_wall_time_s",
];

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    method: Method,
    r0: usize,
    r: usize,
    m: Option<usize>,
}

impl Cell {
    /// Seed stream for this cell. It does not depend on m, so CLEPS cells
    /// that differ only in m share their leading replicates.
    fn seed(&self, master: Seed) -> Seed {
        master
            .derive(stage::MAIN)
            .derive(self.method.ordinal())
            .derive2(self.r0 as u64, self.r as u64)
    }

    fn budget(&self) -> usize {
        self.r0 + self.r
    }
}

/// Data and measurement-error covariance one scenario is evaluated on.
struct Prepared {
    data: Dataset,
    sigma: ErrorCovariance,
    sigma_u2: f64,
}

fn estimate_once(cell: &Cell, prep: &Prepared, seed: Seed, pi_floor: f64) -> Result<DVector<f64>> {
    let data = &prep.data;
    let zero;
    let sigma = if cell.method.is_uncorrected() {
        zero = ErrorCovariance::zero(data.p());
        &zero
    } else {
        &prep.sigma
    };
    let two_step = |criterion, uncorrected| {
        let opts = TwoStepOptions {
            pi_floor,
            uncorrected,
            ..Default::default()
        };
        two_step_estimate_with(data, sigma, cell.r0, cell.r, criterion, seed, opts).map(|res| res.beta)
    };
    match cell.method {
        Method::Full => Ok(full_corrected_estimate(data, sigma)?.beta),
        Method::Unif => Ok(subsample_estimate(data, sigma, &uniform_probs(data.n())?, cell.budget(), seed)?.beta),
        Method::Blev => Ok(subsample_estimate(data, sigma, &leverage_probs(data)?, cell.budget(), seed)?.beta),
        Method::Iboss => {
            let plan = iboss_select(data, cell.budget())?;
            let sub = data.select(plan.indices().expect("IBOSS plans are deterministic"))?;
            Ok(full_corrected_estimate(&sub, sigma)?.beta)
        }
        Method::AOpt | Method::UaOpt => two_step(Criterion::MV, cell.method.is_uncorrected()),
        Method::LOpt | Method::UlOpt => two_step(Criterion::MVc, cell.method.is_uncorrected()),
        Method::Cleps | Method::Ucleps => {
            let m = cell.m.unwrap_or_else(default_m);
            Ok(cleps_estimate(data, sigma, cell.budget(), m, seed)?.beta_mean)
        }
    }
}

fn check_budgets(cells: &[Cell], n: usize, p: usize) -> Result<()> {
    for c in cells {
        if c.method.is_two_step() && c.r0 < p + 1 {
            return Err(EivError::Config(format!(
                "{}: r0 = {} is below p + 1 = {}",
                c.method,
                c.r0,
                p + 1
            )));
        }
        if matches!(c.method, Method::Iboss | Method::Cleps | Method::Ucleps) && c.budget() > n {
            return Err(EivError::Config(format!(
                "{}: budget r0 + r = {} exceeds n = {n}",
                c.method,
                c.budget()
            )));
        }
    }
    Ok(())
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

fn record(cell: &Cell, n: usize, p: usize, sigma_u2: f64) -> BenchRecord {
    BenchRecord {
        method: cell.method,
        n,
        p,
        sigma_u2,
        r0: cell.r0,
        r: cell.r,
        m: cell.m,
        mse: None,
        log10_mse: None,
        failures: 0,
        mean_wall_time_s: None,
    }
}

/// Sums squared errors per cell in replication order.
fn aggregate(cells: &[Cell], per_rep: Vec<Vec<Option<f64>>>, n: usize, p: usize, sigma_u2: f64) -> Vec<BenchRecord> {
    cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let mut sum = CompensatedSum::default();
            let mut ok = 0usize;
            let mut failures = 0usize;
            for rep in &per_rep {
                match rep[c] {
                    Some(v) => {
                        sum.add(v);
                        ok += 1;
                    }
                    None => failures += 1,
                }
            }
            let mut rec = record(cell, n, p, sigma_u2);
            rec.failures = failures;
            if ok > 0 {
                let mse = sum.value() / ok as f64;
                rec.mse = Some(mse);
                rec.log10_mse = Some(mse.log10());
            } else {
                log::warn!("{} r0={} r={}: every replication failed", cell.method, cell.r0, cell.r);
            }
            rec
        })
        .collect()
}

fn evaluate_cells(
    cells: &[Cell],
    prep: &Prepared,
    target: &DVector<f64>,
    master: Seed,
    rep: u64,
    pi_floor: f64,
) -> Result<Vec<Option<f64>>> {
    cells
        .iter()
        .map(|cell| match estimate_once(cell, prep, cell.seed(master).derive(rep), pi_floor) {
            Ok(beta) => Ok(Some(sq_dist(&beta, target))),
            Err(e) if e.is_numerical() => {
                log::debug!("{} r={} replication {rep}: {e}", cell.method, cell.r);
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect()
}

fn csv_scenarios(cfg: &BenchConfig, path: &Path, columns: &ColumnSpec) -> Result<Vec<Prepared>> {
    let loaded = load_csv(path, columns)?;
    let rep = loaded.data;
    let master = Seed::new(cfg.master_seed);
    match (&cfg.sigma_u2_list, rep.common_replication()) {
        (Some(_), Some(j)) if j > 1 => Err(EivError::Config(
            "sigma_u2_list cannot be combined with replicate columns".into(),
        )),
        (Some(levels), _) => {
            let base = rep.means()?;
            levels
                .iter()
                .enumerate()
                .map(|(k, &s2)| {
                    let (data, sigma) = inject_error(&base, s2, master.derive2(stage::NOISE, k as u64))?;
                    Ok(Prepared { data, sigma, sigma_u2: s2 })
                })
                .collect()
        }
        (None, Some(j)) if j > 1 => {
            let sigma_hat = estimate_sigma_uu(&rep)?;
            let sigma_u2 = sigma_hat.matrix().diagonal().max();
            log::info!("estimated measurement-error covariance:\n{}", sigma_hat.matrix());
            let (data, sigma) = rep.averaged_design(&sigma_hat)?;
            Ok(vec![Prepared { data, sigma, sigma_u2 }])
        }
        (None, _) => {
            let data = rep.means()?;
            let sigma = ErrorCovariance::zero(data.p());
            Ok(vec![Prepared { data, sigma, sigma_u2: 0.0 }])
        }
    }
}

/// Mean squared error of every (method, r) cell.
///
/// Simulated data are regenerated for each replication (shared by all cells
/// of that replication) and errors are measured against the true β. CSV data
/// stay fixed, only the subsampling randomness is redrawn, and errors are
/// measured against the full-data corrected estimate.
pub fn run_mse_experiment(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let master = Seed::new(cfg.master_seed);
    let reps = cfg.replications;
    let mut out = Vec::new();
    match &cfg.data {
        DataSource::Simulate { scenario } => {
            for s in cfg.scenarios(scenario) {
                s.validate()?;
                check_budgets(&cells, s.n, s.p)?;
                log::info!("scenario n={} p={} sigma_u2={}: {} cells x {reps} replications", s.n, s.p, s.sigma_u2, cells.len());
                let sigma = s.error_covariance()?;
                let beta = s.beta();
                let per_rep = (0..reps as u64)
                    .into_par_iter()
                    .map(|k| {
                        let mut rep_s = s.clone();
                        rep_s.seed = master.derive2(stage::DATA, k).value();
                        let prep = Prepared {
                            data: generate_observed(&rep_s)?,
                            sigma: sigma.clone(),
                            sigma_u2: s.sigma_u2,
                        };
                        evaluate_cells(&cells, &prep, &beta, master, k, cfg.pi_floor)
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.extend(aggregate(&cells, per_rep, s.n, s.p, s.sigma_u2));
            }
        }
        DataSource::Csv { path, columns } => {
            for prep in csv_scenarios(cfg, path, columns)? {
                let (n, p) = (prep.data.n(), prep.data.p());
                check_budgets(&cells, n, p)?;
                let target = full_corrected_estimate(&prep.data, &prep.sigma)?.beta;
                let per_rep = (0..reps as u64)
                    .into_par_iter()
                    .map(|k| evaluate_cells(&cells, &prep, &target, master, k, cfg.pi_floor))
                    .collect::<Result<Vec<_>>>()?;
                out.extend(aggregate(&cells, per_rep, n, p, prep.sigma_u2));
            }
        }
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// Median wall-clock seconds per method call (probabilities, sampling and
/// solving included; data generation and loading excluded).
pub fn run_timing_experiment(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let master = Seed::new(cfg.master_seed);
    let preps: Vec<Prepared> = match &cfg.data {
        DataSource::Simulate { scenario } => cfg
            .scenarios(scenario)
            .into_iter()
            .map(|mut s| {
                s.seed = master.derive(stage::DATA).value();
                Ok(Prepared {
                    data: generate_observed(&s)?,
                    sigma: s.error_covariance()?,
                    sigma_u2: s.sigma_u2,
                })
            })
            .collect::<Result<_>>()?,
        DataSource::Csv { path, columns } => csv_scenarios(cfg, path, columns)?,
    };
    let mut out = Vec::new();
    for prep in &preps {
        let (n, p) = (prep.data.n(), prep.data.p());
        check_budgets(&cells, n, p)?;
        log::info!("timing n={n} p={p}");
        for cell in &cells {
            let mut times = Vec::with_capacity(cfg.timing_repeats);
            let mut failures = 0;
            for k in 0..cfg.timing_repeats as u64 {
                let seed = cell.seed(master).derive(k);
                let start = Instant::now();
                let res = estimate_once(cell, prep, seed, cfg.pi_floor);
                let elapsed = start.elapsed().as_secs_f64();
                match res {
                    Ok(beta) => {
                        std::hint::black_box(beta);
                        times.push(elapsed);
                    }
                    Err(e) if e.is_numerical() => failures += 1,
                    Err(e) => return Err(e),
                }
            }
            let mut rec = record(cell, n, p, prep.sigma_u2);
            rec.failures = failures;
            rec.mean_wall_time_s = median(times);
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn run_experiment(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    match cfg.experiment {
        Experiment::Mse => run_mse_experiment(cfg),
        Experiment::Timing => run_timing_experiment(cfg),
    }
}

/// Loads or simulates the data described by `source`. CSV files with
/// replicate columns yield the replicate means and `Σ̂uu/J`; otherwise
/// `inject_sigma_u2` adds synthetic error, and without it Σuu is zero.
pub fn load_source(source: &DataSource, inject_sigma_u2: Option<f64>, seed: Seed) -> Result<(Dataset, ErrorCovariance)> {
    match source {
        DataSource::Simulate { scenario } => {
            let mut s = scenario.clone();
            if let Some(s2) = inject_sigma_u2 {
                s.sigma_u2 = s2;
            }
            Ok((generate_observed(&s)?, s.error_covariance()?))
        }
        DataSource::Csv { path, columns } => {
            let rep = load_csv(path, columns)?.data;
            match (rep.common_replication(), inject_sigma_u2) {
                (Some(j), None) if j > 1 => rep.averaged_design(&estimate_sigma_uu(&rep)?),
                (Some(j), Some(_)) if j > 1 => Err(EivError::Config(
                    "error injection cannot be combined with replicate columns".into(),
                )),
                (_, Some(s2)) => inject_error(&rep.means()?, s2, seed.derive(stage::NOISE)),
                _ => {
                    let data = rep.means()?;
                    let p = data.p();
                    Ok((data, ErrorCovariance::zero(p)))
                }
            }
        }
    }
}

/// Result of one estimation call.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub method: Method,
    pub beta: Vec<f64>,
    /// Plug-in covariance, row-major; absent for IBOSS and single-replicate CLEPS.
    pub cov: Option<Vec<Vec<f64>>>,
    pub n: usize,
    pub p: usize,
    pub r0: usize,
    pub r: usize,
    pub m: Option<usize>,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl EstimateReport {
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.cov
            .as_ref()
            .map(|c| (0..c.len()).map(|i| c[i][i].max(0.0).sqrt()).collect())
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Runs one method once and reports the estimate with its covariance.
#[allow(clippy::too_many_arguments)]
pub fn estimate_report(
    method: Method,
    data: &Dataset,
    sigma: &ErrorCovariance,
    r0: usize,
    r: usize,
    m: usize,
    seed: Seed,
    policy: SingularPolicy,
) -> Result<EstimateReport> {
    let zero;
    let sigma = if method.is_uncorrected() {
        zero = ErrorCovariance::zero(data.p());
        &zero
    } else {
        sigma
    };
    let budget = r0 + r;
    let start = Instant::now();
    let (beta, cov) = match method {
        Method::Full => {
            let beta = full_corrected_estimate_with(data, sigma, policy)?.beta;
            let s2 = noise_variance_plugin(data, &beta, sigma)?;
            let cov = full_asymptotic_covariance(data, &beta, sigma, s2)?;
            (beta, Some(cov))
        }
        Method::Unif | Method::Blev => {
            let plan = if method == Method::Unif {
                uniform_probs(data.n())?
            } else {
                leverage_probs(data)?
            };
            let sub = draw_seeded(&plan, budget, seed)?;
            let beta = weighted_corrected_estimate_with(&sub, data, sigma, policy)?.beta;
            let (cov, _) = plugin_covariance(&sub, &beta, data, sigma)?;
            (beta, Some(cov))
        }
        Method::Iboss => {
            let plan = iboss_select(data, budget)?;
            let sub = data.select(plan.indices().expect("IBOSS plans are deterministic"))?;
            (full_corrected_estimate_with(&sub, sigma, policy)?.beta, None)
        }
        Method::AOpt | Method::LOpt | Method::UaOpt | Method::UlOpt => {
            let criterion = if matches!(method, Method::AOpt | Method::UaOpt) {
                Criterion::MV
            } else {
                Criterion::MVc
            };
            let opts = TwoStepOptions {
                policy,
                uncorrected: method.is_uncorrected(),
                ..Default::default()
            };
            let res = two_step_estimate_with(data, sigma, r0, r, criterion, seed, opts)?;
            (res.beta, Some(res.cov))
        }
        Method::Cleps | Method::Ucleps => {
            let opts = ClepsOptions {
                policy,
                ..Default::default()
            };
            let res = cleps_estimate_with(data, sigma, budget, m, seed, opts)?;
            (res.beta_mean, res.cov)
        }
    };
    let wall_time_s = start.elapsed().as_secs_f64();
    Ok(EstimateReport {
        method,
        beta: beta.iter().copied().collect(),
        cov: cov.as_ref().map(rows_of),
        n: data.n(),
        p: data.p(),
        r0: if method == Method::Full { 0 } else { r0 },
        r: if method == Method::Full { 0 } else { r },
        m: method.uses_m().then_some(m),
        seed: seed.value(),
        wall_time_s,
    })
}

/// Writes records as CSV with the fixed column order; an empty list yields
/// just the header.
pub fn write_results_to<W: std::io::Write>(records: &[BenchRecord], sink: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    wtr.write_record(RECORD_COLUMNS)?;
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| EivError::io("<results>", e))?;
    Ok(())
}

pub fn write_results(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| EivError::io(path, e))?;
    write_results_to(records, std::io::BufWriter::new(file))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_COLUMNS {
        return Err(EivError::Schema(format!("unexpected results header {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(EivError::from)).collect()
}
