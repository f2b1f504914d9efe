//! Command-line front end: `simulate`, `estimate`, `variance`, `truth` and
//! `experiment`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data validation
//! error, 4 estimation failure.

pub mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use ltmle::estimators::EstimatorKind;
use ltmle::experiment::{run_grid, CellStatus, GridSpec, MethodPair};
use ltmle::longdata::{emit_csv, ingest_csv, CsvSchema, Regime};
use ltmle::nuisance::Submodel;
use ltmle::simgen::{frozen_truth, generate, true_psi, DgpConfig, Horizon};
use ltmle::variance::{BootstrapOptions, VarianceMethod};
use serde::Serialize;
use thiserror::Error;

use config::FileConfig;
pub use report::{EstimateReport, EstimateSettings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("estimation: {0}")]
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Estimation(_) => 4,
        }
    }
}

impl From<ltmle::Error> for CliError {
    fn from(e: ltmle::Error) -> Self {
        use ltmle::Error as E;
        match &e {
            E::Config(_) | E::Unsupported(_) => CliError::Usage(e.to_string()),
            E::Formula(_) | E::Io(_) | E::TimeIndex { .. } | E::Dimension(_) => CliError::Data(e.to_string()),
            _ if e.is_data_error() => CliError::Data(e.to_string()),
            _ => CliError::Estimation(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "ltmle", version, about = "Longitudinal TMLE estimation, variance estimation and simulation")]
pub struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset from a simulation design and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate a treatment-specific mean or contrast with inference.
    Estimate(EstimateArgs),
    /// Compare every applicable variance estimator for one estimator.
    Variance(EstimateArgs),
    /// Counterfactual truth of a simulation design by Monte Carlo.
    Truth(TruthArgs),
    /// Run a Monte Carlo grid.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct DgpArgs {
    /// `point` or `longitudinal`.
    #[arg(long = "dgp")]
    pub horizon: Option<Horizon>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta_p: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta_psi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV; provenance goes next to it as `<stem>.provenance.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Estimators (comma separated): ipw, aipw, tmle, mtmle.
    #[arg(long, value_delimiter = ',')]
    pub estimator: Vec<String>,
    /// Variance methods (comma separated): eif, robust, robust_regime, robust_ipw, convex, bootstrap.
    #[arg(long, value_delimiter = ',')]
    pub variance: Vec<String>,
    /// Static regimes as treatment strings (e.g. `111,000`); default treat-always versus never.
    #[arg(long, value_delimiter = ',')]
    pub regimes: Vec<String>,
    /// Contrast coefficients, one per regime.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub coefs: Vec<f64>,
    /// Bootstrap draws.
    #[arg(long = "B")]
    pub bootstrap_draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub truncation: Option<f64>,
    /// Treatment-model formula for every node.
    #[arg(long)]
    pub g_formula: Option<String>,
    /// Outcome-regression formula for every level.
    #[arg(long)]
    pub q_formula: Option<String>,
    /// Absorbing event covariate base name (e.g. `L3`).
    #[arg(long)]
    pub event: Option<String>,
    /// Report path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TruthArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    /// Counterfactual draws.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the tabulated value instead of simulating.
    #[arg(long)]
    pub frozen: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for the replicate pool (does not affect results).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Reuse finished cell checkpoints in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long = "dgp")]
    pub horizon: Option<Horizon>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "B")]
    pub bootstrap_draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Serializes with sorted keys and a trailing newline.
pub fn to_stable_json<S: Serialize>(value: &S) -> Result<String, CliError> {
    let v = serde_json::to_value(value).map_err(|e| CliError::Estimation(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| CliError::Estimation(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn log_resolved<S: Serialize>(what: &str, cfg: &S) {
    if let Ok(s) = serde_json::to_string(cfg) {
        info!("{what} resolved config: {s}");
    }
}

#[derive(Serialize)]
struct Provenance<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(&file, a),
        Command::Estimate(a) => estimate(&file, a, false),
        Command::Variance(a) => estimate(&file, a, true),
        Command::Truth(a) => truth(&file, a),
        Command::Experiment(a) => experiment(&file, a),
    }
}

fn require<T>(v: Option<T>, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing `{name}` (flag or config file)")))
}

fn simulate(file: &FileConfig, a: SimulateArgs) -> Result<(), CliError> {
    let d = &file.dgp;
    let cfg = DgpConfig {
        horizon: require(a.dgp.horizon.or(d.horizon), "dgp")?,
        beta_p: require(a.dgp.beta_p.or(d.beta_p), "beta_p")?,
        beta_psi: require(a.dgp.beta_psi.or(d.beta_psi), "beta_psi")?,
        n: require(a.n.or(d.n), "n")?,
        seed: require(a.seed.or(d.seed), "seed")?,
    };
    log_resolved("simulate", &cfg);
    let data = generate(&cfg)?;
    emit_csv(&data, &a.out)?;
    let prov = Provenance { command: "simulate", version: env!("CARGO_PKG_VERSION"), config: &cfg };
    let path = provenance_path(&a.out);
    fs::write(&path, to_stable_json(&prov)?).map_err(|e| io_err(&path, e))?;
    info!("wrote {} rows to {}", data.n(), a.out.display());
    Ok(())
}

pub fn provenance_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.provenance.json"))
}

fn parse_regime(s: &str, k: usize) -> Result<Regime<f64>, CliError> {
    let bits: Vec<u8> = s
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(CliError::Usage(format!("regime `{s}` must be a string of 0/1"))),
        })
        .collect::<Result<_, _>>()?;
    if bits.len() != k + 1 {
        return Err(CliError::Usage(format!("regime `{s}` needs {} treatment values", k + 1)));
    }
    Ok(Regime::fixed(s, bits))
}

fn pairs(estimators: &[EstimatorKind], methods: &[VarianceMethod]) -> Result<Vec<MethodPair>, CliError> {
    let mut out = Vec::new();
    for &e in estimators {
        for &v in methods {
            out.push(MethodPair::new(e, v)?);
        }
    }
    Ok(out)
}

fn estimate(file: &FileConfig, a: EstimateArgs, compare: bool) -> Result<(), CliError> {
    let e = &file.estimate;
    let schema = CsvSchema {
        event: a.event.clone().or(e.event.clone()),
        outcome_range: e.outcome_range,
        ..CsvSchema::default()
    };
    let data = ingest_csv::<f64>(&a.data, &schema)?;
    let k = data.k();

    let estimators: Vec<String> = if !a.estimator.is_empty() {
        a.estimator.clone()
    } else {
        e.estimators.clone().unwrap_or_else(|| vec!["tmle".into()])
    };
    let estimators = estimators.iter().map(|s| s.parse()).collect::<Result<Vec<EstimatorKind>, _>>()?;
    let variance: Option<Vec<String>> = if !a.variance.is_empty() { Some(a.variance.clone()) } else { e.variance.clone() };
    let methods = match variance {
        Some(v) => pairs(&estimators, &v.iter().map(|s| s.parse()).collect::<Result<Vec<VarianceMethod>, _>>()?)?,
        None if compare => estimators
            .iter()
            .flat_map(|&est| VarianceMethod::ALL.iter().filter_map(move |&v| MethodPair::new(est, v).ok()))
            .collect(),
        None => pairs(&estimators, &[VarianceMethod::EmpiricalEif])?,
    };

    let regimes: Vec<String> = if !a.regimes.is_empty() { a.regimes.clone() } else { e.regimes.clone().unwrap_or_default() };
    let (regimes, default_coefs) = if regimes.is_empty() {
        (vec![Regime::constant(k, 1), Regime::constant(k, 0)], vec![1.0, -1.0])
    } else {
        let r = regimes.iter().map(|s| parse_regime(s, k)).collect::<Result<Vec<_>, _>>()?;
        let c = if r.len() == 1 { vec![1.0] } else { vec![] };
        (r, c)
    };
    let coefs = if !a.coefs.is_empty() { a.coefs.clone() } else { e.coefs.clone().unwrap_or(default_coefs) };
    if coefs.len() != regimes.len() {
        return Err(CliError::Usage(format!("{} regimes need {} coefficients", regimes.len(), regimes.len())));
    }

    let mut nuisance = file.nuisance.clone();
    if let Some(g) = &a.g_formula {
        nuisance.g = Some(vec![g.parse()?]);
    }
    if let Some(q) = &a.q_formula {
        nuisance.q = Some(vec![q.parse()?]);
    }
    if a.truncation.is_some() {
        nuisance.truncation = a.truncation;
    }
    let settings = EstimateSettings {
        command: if compare { "variance" } else { "estimate" }.into(),
        data: a.data.display().to_string(),
        methods,
        regimes: regimes.iter().map(|r| r.label.clone()).collect(),
        coefs,
        nuisance: nuisance.resolve(k),
        bootstrap_draws: a.bootstrap_draws.or(e.bootstrap_draws).unwrap_or(BootstrapOptions::default().replicates),
        seed: a.seed.or(e.seed).unwrap_or(0),
        level: a.level.or(e.level).unwrap_or(0.95),
        tmle_submodel: e.tmle_submodel.unwrap_or(Submodel::WeightedIntercept),
        mtmle_submodel: e.mtmle_submodel.unwrap_or(Submodel::CleverCovariate),
        event: schema.event.clone(),
        msm: file.msm.clone(),
    };
    log_resolved(&settings.command, &settings);
    let report = report::build(&data, &regimes, &settings)?;
    write_output(a.out.as_deref(), &to_stable_json(&report)?)
}

fn truth(file: &FileConfig, a: TruthArgs) -> Result<(), CliError> {
    let d = &file.dgp;
    let horizon = require(a.dgp.horizon.or(d.horizon), "dgp")?;
    let beta_psi = require(a.dgp.beta_psi.or(d.beta_psi), "beta_psi")?;
    let t = if a.frozen {
        frozen_truth(horizon, beta_psi)
            .ok_or_else(|| CliError::Usage(format!("no tabulated truth for {} at beta_psi = {beta_psi}", horizon.name())))?
    } else {
        let m = a.m.or(d.truth_draws).unwrap_or(1_000_000);
        let seed = a.seed.or(d.seed).unwrap_or(0);
        info!("truth resolved config: horizon={} beta_psi={beta_psi} m={m} seed={seed}", horizon.name());
        true_psi(horizon, beta_psi, m, seed)?
    };
    write_output(a.out.as_deref(), &to_stable_json(&t)?)
}

fn experiment(file: &FileConfig, a: ExperimentArgs) -> Result<(), CliError> {
    let g = &file.grid;
    let horizon = require(a.horizon.or(g.horizon), "horizon")?;
    let spec = GridSpec {
        horizon,
        beta_p: require(g.beta_p.clone(), "grid.beta_p")?,
        beta_psi: require(g.beta_psi.clone(), "grid.beta_psi")?,
        replicates: a.replicates.or(g.replicates).unwrap_or(500),
        n: a.n.or(g.n).unwrap_or(500),
        bootstrap_draws: a.bootstrap_draws.or(g.bootstrap_draws).unwrap_or(1000),
        methods: g.methods.clone().unwrap_or_else(MethodPair::defaults),
        master_seed: a.seed.or(g.master_seed).unwrap_or(0),
        nuisance: Some(file.nuisance.resolve(horizon.k())),
        tmle_submodel: g.tmle_submodel.unwrap_or(Submodel::WeightedIntercept),
        mtmle_submodel: g.mtmle_submodel.unwrap_or(Submodel::CleverCovariate),
        level: g.level.unwrap_or(0.95),
        alpha: g.alpha.unwrap_or(0.05),
        truth_draws: g.truth_draws.unwrap_or(1_000_000),
    };
    spec.validate()?;
    log_resolved("experiment", &spec);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = a.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let total = spec.beta_p.len() * spec.beta_psi.len();
    let mut done = 0usize;
    let outcome = pool.install(|| {
        run_grid(&spec, &a.out, a.resume, |c| {
            done += 1;
            eprintln!("[{done}/{total}] {} {:?} (failed replicates: {})", c.cell_id, c.status, c.failed_replicates);
        })
    })?;
    eprintln!("summary written to {}", outcome.summary_path.display());
    let unavailable: Vec<&str> =
        outcome.cells.iter().filter(|c| c.status == CellStatus::Unavailable).map(|c| c.cell_id.as_str()).collect();
    if !unavailable.is_empty() {
        return Err(CliError::Estimation(format!("cells unavailable: {}", unavailable.join(", "))));
    }
    Ok(())
}
