//! Monte Carlo harness over a grid of `(beta_p, beta_psi)` cells: replicate
//! loop, per-cell summaries, long-format CSV output with per-cell checkpoints.
//!
//! Every replicate estimates the contrast `E Y_1 - E Y_0` (treat at every node
//! versus never treat).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{aipw_mean, contrast, ipw_mean, modified_tmle_mean, tmle_mean, EstimateResult, EstimatorKind};
use crate::longdata::{LongitudinalDataset, Regime};
use crate::nuisance::{fit_g, fit_sequential_q, NuisanceSpec, RegimeWeights, SequentialQ, Submodel, Targeting};
use crate::scalar::{mean, sample_variance};
use crate::seed::{derive_seed, f64_key};
use crate::simgen::{frozen_truth, generate, true_psi, DgpConfig, Horizon, TruthEstimate};
use crate::variance::{
    bootstrap_targeting_variance, convex_combo_variance, empirical_eif_variance, robust_variance_total, wald_inference,
    BootstrapArm, BootstrapOptions, RobustArm, RobustMethod, VarianceMethod, VarianceReport, WaldInference,
};

/// Stream indices under a replicate's seed.
const DATA_STREAM: u64 = 0;
const BOOTSTRAP_STREAM: u64 = 1;

/// An estimator paired with a variance method, written `estimator:variance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodPair {
    pub estimator: EstimatorKind,
    pub variance: VarianceMethod,
}

impl MethodPair {
    pub fn new(estimator: EstimatorKind, variance: VarianceMethod) -> Result<Self> {
        use VarianceMethod::*;
        let ok = match variance {
            EmpiricalEif => true,
            RobustPlugIn | RobustTmle | RobustIpw | ConvexCombo => estimator.has_outcome_fits(),
            Bootstrap => estimator == EstimatorKind::Mtmle,
        };
        if !ok {
            return Err(Error::Config(format!(
                "variance method `{}` cannot be used with estimator `{}`",
                variance.name(),
                estimator.name()
            )));
        }
        Ok(Self { estimator, variance })
    }

    /// The paper-style comparison: empirical and plug-in robust variance for
    /// AIPW, every robust form for TMLE, and the bootstrap on the modified TMLE.
    pub fn defaults() -> Vec<Self> {
        use EstimatorKind::*;
        use VarianceMethod::*;
        [
            (Aipw, EmpiricalEif),
            (Aipw, RobustPlugIn),
            (Tmle, EmpiricalEif),
            (Tmle, RobustPlugIn),
            (Tmle, RobustTmle),
            (Tmle, RobustIpw),
            (Tmle, ConvexCombo),
            (Mtmle, EmpiricalEif),
            (Mtmle, Bootstrap),
        ]
        .into_iter()
        .map(|(e, v)| Self { estimator: e, variance: v })
        .collect()
    }
}

impl fmt::Display for MethodPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.estimator.name(), self.variance.name())
    }
}

impl std::str::FromStr for MethodPair {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (e, v) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("method `{s}` must be written `estimator:variance`")))?;
        Self::new(e.trim().parse()?, v.trim().parse()?)
    }
}

impl TryFrom<String> for MethodPair {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodPair> for String {
    fn from(m: MethodPair) -> String {
        m.to_string()
    }
}

fn default_methods() -> Vec<MethodPair> {
    MethodPair::defaults()
}
fn default_level() -> f64 {
    0.95
}
fn default_alpha() -> f64 {
    0.05
}
fn default_truth_draws() -> usize {
    1_000_000
}
fn default_tmle_submodel() -> Submodel {
    Submodel::WeightedIntercept
}
fn default_mtmle_submodel() -> Submodel {
    Submodel::CleverCovariate
}

/// A simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: Horizon,
    pub beta_p: Vec<f64>,
    pub beta_psi: Vec<f64>,
    /// Replicates per cell.
    pub replicates: usize,
    /// Sample size per replicate.
    pub n: usize,
    /// Bootstrap draws per replicate.
    pub bootstrap_draws: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodPair>,
    pub master_seed: u64,
    /// Nuisance formulas and truncation; defaults depend on the design.
    #[serde(default)]
    pub nuisance: Option<NuisanceSpec>,
    #[serde(default = "default_tmle_submodel")]
    pub tmle_submodel: Submodel,
    /// Fluctuation used by the modified TMLE and its bootstrap.
    #[serde(default = "default_mtmle_submodel")]
    pub mtmle_submodel: Submodel,
    /// Confidence level of the Wald intervals.
    #[serde(default = "default_level")]
    pub level: f64,
    /// Test size for power / Type I error.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Counterfactual draws when no frozen truth is tabulated.
    #[serde(default = "default_truth_draws")]
    pub truth_draws: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("replicates must be at least 2, got {}", self.replicates)));
        }
        if self.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        if self.beta_p.is_empty() || self.beta_psi.is_empty() {
            return Err(Error::Config("grid needs at least one beta_p and one beta_psi".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        for m in &self.methods {
            MethodPair::new(m.estimator, m.variance)?;
        }
        if self.methods.iter().any(|m| m.variance == VarianceMethod::Bootstrap) && self.bootstrap_draws < 2 {
            return Err(Error::Config("bootstrap needs bootstrap_draws >= 2".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("level and alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn nuisance_spec(&self) -> NuisanceSpec {
        self.nuisance.clone().unwrap_or_else(|| match self.horizon {
            Horizon::Point => NuisanceSpec::default(),
            Horizon::Longitudinal => NuisanceSpec::longitudinal(),
        })
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &bp in &self.beta_p {
            for &bpsi in &self.beta_psi {
                out.push(Cell { beta_p: bp, beta_psi: bpsi });
            }
        }
        out
    }

    /// Analysis plan of one replicate.
    pub fn plan(&self, bootstrap_seed: u64) -> AnalysisPlan {
        AnalysisPlan {
            tmle_submodel: self.tmle_submodel,
            mtmle_submodel: self.mtmle_submodel,
            bootstrap_draws: self.bootstrap_draws,
            bootstrap_seed,
            level: self.level,
            ..AnalysisPlan::always_vs_never(self.horizon.k(), self.methods.clone())
        }
    }
}

/// One grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub beta_p: f64,
    pub beta_psi: f64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("bp{}_bpsi{}", self.beta_p, self.beta_psi)
    }

    /// Seed-ladder key; depends only on the coordinates, not the grid layout.
    pub fn key(&self) -> u64 {
        derive_seed(0, &[f64_key(self.beta_p), f64_key(self.beta_psi)])
    }
}

/// Result of one (estimator, variance) pair in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub method: MethodPair,
    pub psi_hat: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

/// Everything computed for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub cell_id: String,
    pub r: usize,
    pub error: Option<String>,
    /// Point estimates by estimator name.
    pub estimates: BTreeMap<String, f64>,
    pub inferences: Vec<InferenceRecord>,
    /// Variance methods that failed in this replicate, with the reason.
    pub method_errors: Vec<(String, String)>,
    /// Share of observations with a truncated final cumulative probability.
    pub truncated_fraction: f64,
}

impl ReplicateRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Regimes, contrast coefficients and methods of one analysis.
#[derive(Clone)]
pub struct AnalysisPlan {
    pub regimes: Vec<Regime<f64>>,
    /// Contrast coefficients, one per regime.
    pub coefs: Vec<f64>,
    pub methods: Vec<MethodPair>,
    pub tmle_submodel: Submodel,
    pub mtmle_submodel: Submodel,
    pub bootstrap_draws: usize,
    pub bootstrap_seed: u64,
    pub level: f64,
}

impl AnalysisPlan {
    /// `E Y_1 - E Y_0` for treat-always versus never.
    pub fn always_vs_never(k: usize, methods: Vec<MethodPair>) -> Self {
        Self {
            regimes: vec![Regime::constant(k, 1), Regime::constant(k, 0)],
            coefs: vec![1.0, -1.0],
            methods,
            tmle_submodel: Submodel::WeightedIntercept,
            mtmle_submodel: Submodel::CleverCovariate,
            bootstrap_draws: BootstrapOptions::default().replicates,
            bootstrap_seed: 0,
            level: 0.95,
        }
    }

    fn estimators(&self) -> Vec<EstimatorKind> {
        let mut e: Vec<EstimatorKind> = self.methods.iter().map(|m| m.estimator).collect();
        e.sort();
        e.dedup();
        e
    }
}

/// Fitted treatment weights and untargeted outcome regressions per regime.
pub struct FittedArms {
    pub weights: Vec<RegimeWeights<f64>>,
    pub initial: Vec<SequentialQ<f64>>,
}

impl FittedArms {
    pub fn fit(data: &LongitudinalDataset<f64>, spec: &NuisanceSpec, regimes: &[Regime<f64>]) -> Result<Self> {
        let mech = fit_g(data, spec)?;
        let weights = regimes.iter().map(|d| RegimeWeights::new(data, &mech, d)).collect::<Result<Vec<_>>>()?;
        let initial =
            weights.iter().map(|w| fit_sequential_q(data, w, spec, Targeting::None)).collect::<Result<Vec<_>>>()?;
        Ok(Self { weights, initial })
    }
}

/// One variance method applied to one estimate.
pub struct MethodOutcome {
    pub method: MethodPair,
    pub result: Result<(VarianceReport<f64>, WaldInference)>,
}

/// Output of [`analyze`].
pub struct Analysis {
    pub estimates: Vec<EstimateResult<f64>>,
    pub outcomes: Vec<MethodOutcome>,
    pub arms: FittedArms,
}

fn estimate(
    kind: EstimatorKind,
    data: &LongitudinalDataset<f64>,
    spec: &NuisanceSpec,
    plan: &AnalysisPlan,
    arms: &FittedArms,
) -> Result<EstimateResult<f64>> {
    let per_arm = arms
        .weights
        .iter()
        .zip(&arms.initial)
        .map(|(w, q)| match kind {
            EstimatorKind::Aipw => aipw_mean(w, q),
            EstimatorKind::Tmle => tmle_mean(data, w, spec, plan.tmle_submodel),
            EstimatorKind::Mtmle => modified_tmle_mean(w, q, plan.mtmle_submodel),
            EstimatorKind::Ipw => ipw_mean(data, w),
        })
        .collect::<Result<Vec<_>>>()?;
    contrast(&per_arm, &plan.coefs)
}

fn variance_for(
    method: VarianceMethod,
    data: &LongitudinalDataset<f64>,
    spec: &NuisanceSpec,
    plan: &AnalysisPlan,
    arms: &FittedArms,
    est: &EstimateResult<f64>,
) -> Result<VarianceReport<f64>> {
    let robust = |m: RobustMethod| -> Result<VarianceReport<f64>> {
        let ra: Vec<RobustArm<'_, f64>> = (0..arms.weights.len())
            .map(|a| RobustArm {
                weights: &arms.weights[a],
                q: &est.q[a],
                psi: est.per_arm[a].psi_hat,
                coef: plan.coefs[a],
            })
            .collect();
        robust_variance_total(data, &ra, spec, m)
    };
    match method {
        VarianceMethod::EmpiricalEif => empirical_eif_variance(&est.eif),
        VarianceMethod::RobustPlugIn => robust(RobustMethod::PlugIn),
        VarianceMethod::RobustTmle => robust(RobustMethod::Tmle),
        VarianceMethod::RobustIpw => robust(RobustMethod::Ipw),
        VarianceMethod::ConvexCombo => {
            convex_combo_variance(&empirical_eif_variance(&est.eif)?, &robust(RobustMethod::PlugIn)?)
        }
        VarianceMethod::Bootstrap => {
            let ba: Vec<BootstrapArm<'_, f64>> = (0..arms.weights.len())
                .map(|a| BootstrapArm { weights: &arms.weights[a], q_initial: &arms.initial[a], coef: plan.coefs[a] })
                .collect();
            let opts = BootstrapOptions {
                replicates: plan.bootstrap_draws,
                seed: plan.bootstrap_seed,
                submodel: plan.mtmle_submodel,
                ..BootstrapOptions::default()
            };
            bootstrap_targeting_variance(&ba, &opts)
        }
    }
}

/// Fits the nuisances once, then computes every requested estimator and
/// variance method. Point-estimation failures abort; variance failures are
/// reported per method.
pub fn analyze(data: &LongitudinalDataset<f64>, spec: &NuisanceSpec, plan: &AnalysisPlan) -> Result<Analysis> {
    if plan.regimes.is_empty() || plan.regimes.len() != plan.coefs.len() {
        return Err(Error::Config("one contrast coefficient per regime is required".into()));
    }
    for m in &plan.methods {
        MethodPair::new(m.estimator, m.variance)?;
    }
    let arms = FittedArms::fit(data, spec, &plan.regimes)?;
    let mut estimates = Vec::new();
    let mut outcomes = Vec::new();
    for kind in plan.estimators() {
        let est = estimate(kind, data, spec, plan, &arms)?;
        for m in plan.methods.iter().filter(|m| m.estimator == kind) {
            let result = variance_for(m.variance, data, spec, plan, &arms, &est)
                .and_then(|v| wald_inference(est.psi_hat, &v, plan.level).map(|w| (v, w)));
            outcomes.push(MethodOutcome { method: *m, result });
        }
        estimates.push(est);
    }
    Ok(Analysis { estimates, outcomes, arms })
}

/// Seed of replicate `r` in `cell` for stream `stream`.
pub fn replicate_seed(grid: &GridSpec, cell: &Cell, r: usize, stream: u64) -> u64 {
    derive_seed(grid.master_seed, &[cell.key(), r as u64, stream])
}

/// Dataset of replicate `r` in `cell`.
pub fn replicate_dataset(grid: &GridSpec, cell: &Cell, r: usize) -> Result<LongitudinalDataset<f64>> {
    generate(&DgpConfig {
        horizon: grid.horizon,
        beta_p: cell.beta_p,
        beta_psi: cell.beta_psi,
        n: grid.n,
        seed: replicate_seed(grid, cell, r, DATA_STREAM),
    })
}

/// Generates, fits and evaluates one replicate. Estimation failures are
/// recorded on the record rather than returned.
pub fn run_replicate(grid: &GridSpec, cell: &Cell, r: usize) -> ReplicateRecord {
    let mut rec = ReplicateRecord {
        cell_id: cell.id(),
        r,
        error: None,
        estimates: BTreeMap::new(),
        inferences: Vec::new(),
        method_errors: Vec::new(),
        truncated_fraction: 0.0,
    };
    if let Err(e) = fill_replicate(grid, cell, r, &mut rec) {
        rec.error = Some(e.to_string());
        rec.estimates.clear();
        rec.inferences.clear();
    }
    rec
}

fn fill_replicate(grid: &GridSpec, cell: &Cell, r: usize, rec: &mut ReplicateRecord) -> Result<()> {
    let data = replicate_dataset(grid, cell, r)?;
    let plan = grid.plan(replicate_seed(grid, cell, r, BOOTSTRAP_STREAM));
    let a = analyze(&data, &grid.nuisance_spec(), &plan)?;
    rec.truncated_fraction = a.arms.weights.iter().map(|w| w.truncated_fraction(data.k() + 1)).fold(0.0, f64::max);
    for est in &a.estimates {
        rec.estimates.insert(est.method.name().to_string(), est.psi_hat);
    }
    for o in a.outcomes {
        let psi_hat = rec.estimates[o.method.estimator.name()];
        match o.result {
            Ok((v, w)) => rec.inferences.push(InferenceRecord {
                method: o.method,
                psi_hat,
                variance: v.variance_of_psi_hat,
                lower: w.lower,
                upper: w.upper,
                p_value: w.p_value,
                degenerate: v.degenerate,
            }),
            Err(e) => rec.method_errors.push((o.method.to_string(), e.to_string())),
        }
    }
    Ok(())
}

/// Value with Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metric {
    pub value: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub mean_psi: Metric,
    pub bias: Metric,
    /// Sample variance of the point estimates across replicates.
    pub mc_variance: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: MethodPair,
    pub used: usize,
    pub mean_variance: Metric,
    pub variance_of_variance: f64,
    pub coverage: Metric,
    /// Rejection rate of `psi = 0` (Type I error when the truth is 0, else power).
    pub rejection_rate: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell_id: String,
    pub beta_p: f64,
    pub beta_psi: f64,
    pub replicates: usize,
    pub failed: usize,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub estimators: Vec<EstimatorSummary>,
    pub methods: Vec<MethodSummary>,
}

fn mean_metric(values: &[f64]) -> Metric {
    let n = values.len() as f64;
    Metric { value: mean(values), mc_se: (sample_variance(values) / n).sqrt() }
}

fn rate_metric(hits: usize, total: usize) -> Metric {
    let p = if total == 0 { f64::NAN } else { hits as f64 / total as f64 };
    Metric { value: p, mc_se: (p * (1.0 - p) / total as f64).sqrt() }
}

/// Aggregates replicate records. The result does not depend on record order.
pub fn summarize(cell: &Cell, records: &[ReplicateRecord], truth: &TruthEstimate, alpha: f64) -> Result<CellSummary> {
    let mut records: Vec<&ReplicateRecord> = records.iter().collect();
    records.sort_by_key(|r| r.r);
    let ok: Vec<&ReplicateRecord> = records.iter().copied().filter(|r| r.ok()).collect();
    if ok.len() < 2 {
        return Err(Error::Cell {
            cell: cell.id(),
            source: Box::new(Error::Estimation(format!("only {} successful replicates", ok.len()))),
        });
    }
    let mut names: Vec<&String> = ok.iter().flat_map(|r| r.estimates.keys()).collect();
    names.sort();
    names.dedup();
    let estimators = names
        .into_iter()
        .filter_map(|name| {
            let v: Vec<f64> = ok.iter().filter_map(|r| r.estimates.get(name).copied()).collect();
            let kind: EstimatorKind = name.parse().ok()?;
            let m = mean_metric(&v);
            let s2 = sample_variance(&v);
            Some(EstimatorSummary {
                estimator: kind,
                mean_psi: m,
                bias: Metric { value: m.value - truth.psi, mc_se: m.mc_se },
                mc_variance: Metric { value: s2, mc_se: s2 * (2.0 / (v.len() as f64 - 1.0)).sqrt() },
            })
        })
        .collect();
    let mut pairs: Vec<MethodPair> = ok.iter().flat_map(|r| r.inferences.iter().map(|i| i.method)).collect();
    pairs.sort();
    pairs.dedup();
    let methods = pairs
        .into_iter()
        .map(|method| {
            let inf: Vec<&InferenceRecord> =
                ok.iter().flat_map(|r| r.inferences.iter()).filter(|i| i.method == method).collect();
            let vars: Vec<f64> = inf.iter().map(|i| i.variance).collect();
            let covered = inf.iter().filter(|i| i.lower <= truth.psi && truth.psi <= i.upper).count();
            let rejected = inf.iter().filter(|i| i.p_value < alpha).count();
            MethodSummary {
                method,
                used: inf.len(),
                mean_variance: mean_metric(&vars),
                variance_of_variance: sample_variance(&vars),
                coverage: rate_metric(covered, inf.len()),
                rejection_rate: rate_metric(rejected, inf.len()),
            }
        })
        .collect();
    Ok(CellSummary {
        cell_id: cell.id(),
        beta_p: cell.beta_p,
        beta_psi: cell.beta_psi,
        replicates: records.len(),
        failed: records.len() - ok.len(),
        truth: truth.psi,
        truth_mc_se: truth.mc_se,
        estimators,
        methods,
    })
}

/// One row of the long-format summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell_id: String,
    pub beta_p: f64,
    pub beta_psi: f64,
    pub estimator: String,
    pub var_method: String,
    pub metric: String,
    pub value: f64,
    pub mc_se: f64,
}

impl CellSummary {
    pub fn rows(&self) -> Vec<SummaryRow> {
        let row = |estimator: &str, var_method: &str, metric: &str, m: Metric| SummaryRow {
            cell_id: self.cell_id.clone(),
            beta_p: self.beta_p,
            beta_psi: self.beta_psi,
            estimator: estimator.into(),
            var_method: var_method.into(),
            metric: metric.into(),
            value: m.value,
            mc_se: m.mc_se,
        };
        let exact = |v: f64| Metric { value: v, mc_se: 0.0 };
        let mut out = vec![
            row("", "", "replicates", exact(self.replicates as f64)),
            row("", "", "failed", exact(self.failed as f64)),
            row("", "", "truth", Metric { value: self.truth, mc_se: self.truth_mc_se }),
        ];
        for e in &self.estimators {
            let name = e.estimator.name();
            out.push(row(name, "", "mean_psi", e.mean_psi));
            out.push(row(name, "", "bias", e.bias));
            out.push(row(name, "", "mc_variance", e.mc_variance));
        }
        for m in &self.methods {
            let (e, v) = (m.method.estimator.name(), m.method.variance.name());
            out.push(row(e, v, "used", exact(m.used as f64)));
            out.push(row(e, v, "mean_variance", m.mean_variance));
            out.push(row(e, v, "variance_of_variance", exact(m.variance_of_variance)));
            out.push(row(e, v, "coverage", m.coverage));
            out.push(row(e, v, "rejection_rate", m.rejection_rate));
        }
        out
    }
}

/// Lookup helper over summary rows.
pub fn find_metric<'a>(rows: &'a [SummaryRow], cell_id: &str, estimator: &str, var_method: &str, metric: &str) -> Option<&'a SummaryRow> {
    rows.iter()
        .find(|r| r.cell_id == cell_id && r.estimator == estimator && r.var_method == var_method && r.metric == metric)
}

/// Truth for a cell: frozen fixture when tabulated, else a fresh Monte Carlo run.
pub fn cell_truth(grid: &GridSpec, cell: &Cell) -> Result<TruthEstimate> {
    match frozen_truth(grid.horizon, cell.beta_psi) {
        Some(t) => Ok(t),
        None => {
            info!("no frozen truth for beta_psi = {}; simulating {} draws", cell.beta_psi, grid.truth_draws);
            true_psi(grid.horizon, cell.beta_psi, grid.truth_draws, derive_seed(grid.master_seed, &[f64_key(cell.beta_psi)]))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Computed,
    Resumed,
    Unavailable,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub cell_id: String,
    pub status: CellStatus,
    pub failed_replicates: usize,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub summary_path: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub rows: Vec<SummaryRow>,
}

impl GridOutcome {
    pub fn any_unavailable(&self) -> bool {
        self.cells.iter().any(|c| c.status == CellStatus::Unavailable)
    }
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const GRID_FILE: &str = "grid.json";

fn cell_err(cell: &Cell, e: impl Into<Error>) -> Error {
    Error::Cell { cell: cell.id(), source: Box::new(e.into()) }
}

fn write_rows(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?)
}

#[derive(Debug, Serialize)]
struct RecordRow<'a> {
    cell_id: &'a str,
    r: usize,
    estimator: &'a str,
    var_method: &'a str,
    psi_hat: f64,
    variance: f64,
    lower: f64,
    upper: f64,
    p_value: f64,
    error: &'a str,
}

fn write_records(path: &Path, records: &[ReplicateRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in records {
        if let Some(e) = &rec.error {
            w.serialize(RecordRow {
                cell_id: &rec.cell_id,
                r: rec.r,
                estimator: "",
                var_method: "",
                psi_hat: f64::NAN,
                variance: f64::NAN,
                lower: f64::NAN,
                upper: f64::NAN,
                p_value: f64::NAN,
                error: e,
            })?;
            continue;
        }
        for i in &rec.inferences {
            w.serialize(RecordRow {
                cell_id: &rec.cell_id,
                r: rec.r,
                estimator: i.method.estimator.name(),
                var_method: i.method.variance.name(),
                psi_hat: i.psi_hat,
                variance: i.variance,
                lower: i.lower,
                upper: i.upper,
                p_value: i.p_value,
                error: "",
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs every replicate of one cell (in parallel, collected in order).
pub fn run_cell(grid: &GridSpec, cell: &Cell) -> Vec<ReplicateRecord> {
    (0..grid.replicates).into_par_iter().map(|r| run_replicate(grid, cell, r)).collect()
}

/// Runs the grid into `out_dir`. With `resume`, cells whose checkpoint exists
/// are read back instead of recomputed; the stored grid spec must match.
pub fn run_grid(grid: &GridSpec, out_dir: &Path, resume: bool, mut progress: impl FnMut(&CellOutcome)) -> Result<GridOutcome> {
    grid.validate()?;
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let spec_path = out_dir.join(GRID_FILE);
    let spec_json = serde_json::to_string_pretty(grid).map_err(|e| Error::Config(e.to_string()))?;
    if resume && spec_path.exists() {
        let stored: GridSpec =
            serde_json::from_str(&fs::read_to_string(&spec_path)?).map_err(|e| Error::Config(e.to_string()))?;
        if &stored != grid {
            return Err(Error::Config(format!("{} holds a different grid; refusing to resume", spec_path.display())));
        }
    }
    fs::write(&spec_path, spec_json)?;

    let mut all_rows = Vec::new();
    let mut outcomes = Vec::new();
    for cell in grid.cells() {
        let id = cell.id();
        let checkpoint = cells_dir.join(format!("{id}.csv"));
        let outcome = if resume && checkpoint.exists() {
            let rows = read_rows(&checkpoint).map_err(|e| cell_err(&cell, e))?;
            let failed = find_metric(&rows, &id, "", "", "failed").map_or(0, |r| r.value as usize);
            let status = if find_metric(&rows, &id, "", "", "unavailable").is_some() {
                CellStatus::Unavailable
            } else {
                CellStatus::Resumed
            };
            all_rows.extend(rows);
            CellOutcome { cell_id: id, status, failed_replicates: failed }
        } else {
            let truth = cell_truth(grid, &cell).map_err(|e| cell_err(&cell, e))?;
            let records = run_cell(grid, &cell);
            write_records(&cells_dir.join(format!("{id}.replicates.csv")), &records).map_err(|e| cell_err(&cell, e))?;
            let failed = records.iter().filter(|r| !r.ok()).count();
            if failed > 0 {
                warn!("cell {id}: {failed} of {} replicates failed and are excluded", records.len());
            }
            let (rows, status) = match summarize(&cell, &records, &truth, grid.alpha) {
                Ok(s) => (s.rows(), CellStatus::Computed),
                Err(e) => {
                    warn!("cell {id} unavailable: {e}");
                    let mk = |metric: &str, value: f64| SummaryRow {
                        cell_id: id.clone(),
                        beta_p: cell.beta_p,
                        beta_psi: cell.beta_psi,
                        estimator: String::new(),
                        var_method: String::new(),
                        metric: metric.into(),
                        value,
                        mc_se: 0.0,
                    };
                    (
                        vec![mk("replicates", records.len() as f64), mk("failed", failed as f64), mk("unavailable", 1.0)],
                        CellStatus::Unavailable,
                    )
                }
            };
            write_rows(&checkpoint, &rows).map_err(|e| cell_err(&cell, e))?;
            all_rows.extend(rows);
            CellOutcome { cell_id: id, status, failed_replicates: failed }
        };
        progress(&outcome);
        outcomes.push(outcome);
    }
    let summary_path = out_dir.join(SUMMARY_FILE);
    write_rows(&summary_path, &all_rows)?;
    Ok(GridOutcome { summary_path, cells: outcomes, rows: all_rows })
}
