//! JSON reports of `estimate` and `variance`.

use ltmle::estimators::{tmle_mean, ArmEstimate, EstimateResult, EstimatorKind};
use ltmle::experiment::{analyze, AnalysisPlan, MethodPair};
use ltmle::longdata::{LongitudinalDataset, Regime};
use ltmle::msm::{msm_intercept_identity_check, msm_variance_total, InterceptIdentity, MsmArm, MsmConfig, MsmVarianceReport};
use ltmle::nuisance::{NuisanceSpec, Submodel, TargetingStep};
use ltmle::variance::{
    empirical_eif_variance, red_flag_report, robust_variance_total, RedFlag, RobustArm, RobustMethod, VarianceReport,
    WaldInference, RED_FLAG_THRESHOLD,
};
use serde::Serialize;

use crate::CliError;

/// Fully resolved settings of an estimation run.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateSettings {
    pub command: String,
    pub data: String,
    pub methods: Vec<MethodPair>,
    pub regimes: Vec<String>,
    pub coefs: Vec<f64>,
    pub nuisance: NuisanceSpec,
    pub bootstrap_draws: usize,
    pub seed: u64,
    pub level: f64,
    pub tmle_submodel: Submodel,
    pub mtmle_submodel: Submodel,
    pub event: Option<String>,
    pub msm: Option<MsmConfig>,
}

#[derive(Debug, Serialize)]
pub struct MethodEntry {
    pub variance_method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inference: Option<WaldInference>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<VarianceReport<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct EstimatorEntry {
    pub estimator: EstimatorKind,
    pub label: String,
    pub psi_hat: f64,
    pub per_arm: Vec<ArmEstimate<f64>>,
    pub eif_mean: f64,
    pub targeting: Vec<TargetingStep<f64>>,
    pub variance: Vec<MethodEntry>,
}

#[derive(Debug, Serialize)]
pub struct MsmBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<MsmVarianceReport<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intercept_identity: Option<InterceptIdentity<f64>>,
    pub errors: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub settings: EstimateSettings,
    pub n: usize,
    pub k: usize,
    pub estimates: Vec<EstimatorEntry>,
    /// Sparsity diagnostic, from the first substitution estimator.
    pub red_flag: Option<RedFlag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msm: Option<MsmBlock>,
}

fn robust_report(
    data: &LongitudinalDataset<f64>,
    est: &EstimateResult<f64>,
    weights: &[ltmle::nuisance::RegimeWeights<f64>],
    coefs: &[f64],
    spec: &NuisanceSpec,
) -> ltmle::Result<VarianceReport<f64>> {
    let arms: Vec<RobustArm<'_, f64>> = (0..weights.len())
        .map(|a| RobustArm { weights: &weights[a], q: &est.q[a], psi: est.per_arm[a].psi_hat, coef: coefs[a] })
        .collect();
    robust_variance_total(data, &arms, spec, RobustMethod::PlugIn)
}

pub fn build(
    data: &LongitudinalDataset<f64>,
    regimes: &[Regime<f64>],
    s: &EstimateSettings,
) -> Result<EstimateReport, CliError> {
    let plan = AnalysisPlan {
        regimes: regimes.to_vec(),
        coefs: s.coefs.clone(),
        methods: s.methods.clone(),
        tmle_submodel: s.tmle_submodel,
        mtmle_submodel: s.mtmle_submodel,
        bootstrap_draws: s.bootstrap_draws,
        bootstrap_seed: s.seed,
        level: s.level,
    };
    let analysis = analyze(data, &s.nuisance, &plan)?;
    let mut outcomes = analysis.outcomes.into_iter().peekable();
    let mut estimates = Vec::new();
    for est in &analysis.estimates {
        let mut variance = Vec::new();
        while let Some(o) = outcomes.next_if(|o| o.method.estimator == est.method) {
            let name = o.method.variance.name().to_string();
            variance.push(match o.result {
                Ok((v, w)) => MethodEntry { variance_method: name, inference: Some(w), details: Some(v), error: None },
                Err(e) => MethodEntry { variance_method: name, inference: None, details: None, error: Some(e.to_string()) },
            });
        }
        estimates.push(EstimatorEntry {
            estimator: est.method,
            label: est.label.clone(),
            psi_hat: est.psi_hat,
            per_arm: est.per_arm.clone(),
            eif_mean: est.eif.mean(),
            targeting: est.epsilon_trace.clone(),
            variance,
        });
    }

    let weights = &analysis.arms.weights;
    let red_flag = analysis.estimates.iter().find(|e| e.method.is_substitution()).and_then(|est| {
        let emp = empirical_eif_variance(&est.eif).ok()?;
        let rob = robust_report(data, est, weights, &s.coefs, &s.nuisance).ok()?;
        Some(red_flag_report(&emp, &rob, &weights.iter().collect::<Vec<_>>(), RED_FLAG_THRESHOLD))
    });

    let msm = s.msm.as_ref().map(|cfg| msm_block(data, cfg, s)).transpose()?;
    Ok(EstimateReport { settings: s.clone(), n: data.n(), k: data.k(), estimates, red_flag, msm })
}

fn msm_block(data: &LongitudinalDataset<f64>, cfg: &MsmConfig, s: &EstimateSettings) -> Result<MsmBlock, CliError> {
    let spec = cfg.into_spec::<f64>(data.k())?;
    let arms = ltmle::experiment::FittedArms::fit(data, &s.nuisance, &spec.regimes)?;
    let fits = arms
        .weights
        .iter()
        .map(|w| tmle_mean(data, w, &s.nuisance, Submodel::WeightedIntercept))
        .collect::<ltmle::Result<Vec<_>>>()?;
    let msm_arms: Vec<MsmArm<'_, f64>> = arms
        .weights
        .iter()
        .zip(&fits)
        .map(|(w, f)| MsmArm { weights: w, q: &f.q[0], psi: f.psi_hat })
        .collect();
    let mut errors = Vec::new();
    let variance = msm_variance_total(data, &spec, &s.nuisance, &msm_arms).map_err(|e| errors.push(e.to_string())).ok();
    let intercept_identity =
        msm_intercept_identity_check(data, &spec, &s.nuisance, &msm_arms).map_err(|e| errors.push(e.to_string())).ok();
    Ok(MsmBlock { variance, intercept_identity, errors })
}
