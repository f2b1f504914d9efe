//! Point estimators of `psi = E Y_d` and contrasts: IPW, AIPW, standard
//! (interleaved) TMLE and the modified TMLE, plus the per-subject EIF.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longdata::LongitudinalDataset;
use crate::nuisance::{
    fit_sequential_q, target_sequential, NuisanceSpec, RegimeWeights, SequentialQ, Submodel, Targeting,
    TargetingStep,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ipw,
    Aipw,
    Tmle,
    /// All initial fits first, then a separate targeting pass.
    Mtmle,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Aipw => "aipw",
            EstimatorKind::Tmle => "tmle",
            EstimatorKind::Mtmle => "mtmle",
        }
    }

    /// Substitution estimators respect the outcome bounds.
    pub fn is_substitution(self) -> bool {
        matches!(self, EstimatorKind::Tmle | EstimatorKind::Mtmle)
    }

    /// Carries sequential outcome fits (everything but IPW).
    pub fn has_outcome_fits(self) -> bool {
        self != EstimatorKind::Ipw
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipw" => Ok(Self::Ipw),
            "aipw" => Ok(Self::Aipw),
            "tmle" => Ok(Self::Tmle),
            "mtmle" | "modified_tmle" => Ok(Self::Mtmle),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Per-subject EIF components `D*_t`, `t = 0..=K+1`, and their sum.
#[derive(Debug, Clone, Serialize)]
pub struct EifDecomposition<T> {
    pub label: String,
    /// `components[t][i]`.
    pub components: Vec<Vec<T>>,
    pub total: Vec<T>,
}

impl<T: Scalar> EifDecomposition<T> {
    fn from_components(label: String, components: Vec<Vec<T>>) -> Self {
        let n = components.first().map_or(0, Vec::len);
        let total = (0..n).map(|i| components.iter().fold(T::zero(), |acc, c| acc + c[i])).collect();
        Self { label, components, total }
    }

    pub fn n(&self) -> usize {
        self.total.len()
    }

    /// `P_n D*`.
    pub fn mean(&self) -> T {
        self.total.iter().copied().sum::<T>() / T::from_usize_lossy(self.n())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmEstimate<T> {
    pub label: String,
    pub weight: T,
    pub psi_hat: T,
}

#[derive(Debug, Clone)]
pub struct EstimateResult<T> {
    pub method: EstimatorKind,
    pub label: String,
    pub psi_hat: T,
    /// One entry per regime (a single entry for a plain mean).
    pub per_arm: Vec<ArmEstimate<T>>,
    pub eif: EifDecomposition<T>,
    pub epsilon_trace: Vec<TargetingStep<T>>,
    /// Sequential fits used, one per arm (absent for IPW).
    pub q: Vec<SequentialQ<T>>,
}

impl<T: Scalar> EstimateResult<T> {
    fn single(method: EstimatorKind, label: &str, psi_hat: T, eif: EifDecomposition<T>, q: Option<SequentialQ<T>>) -> Self {
        let epsilon_trace = q.as_ref().map(|q| q.steps().to_vec()).unwrap_or_default();
        Self {
            method,
            label: label.to_string(),
            psi_hat,
            per_arm: vec![ArmEstimate { label: label.to_string(), weight: T::one(), psi_hat }],
            eif,
            epsilon_trace,
            q: q.into_iter().collect(),
        }
    }
}

/// `psi = mean(H_{K+1} Y)`.
pub fn ipw_mean<T: Scalar>(data: &LongitudinalDataset<T>, weights: &RegimeWeights<T>) -> Result<EstimateResult<T>> {
    let (n, k) = (data.n(), data.k());
    if weights.history.followers(k + 1) == 0 {
        warn!("no subject follows `{}`; IPW estimate is 0", weights.label());
    }
    let y = data.outcome();
    let contrib: Vec<T> = (0..n).map(|i| weights.h(k + 1, i) * y[i]).collect();
    let psi = contrib.iter().copied().sum::<T>() / T::from_usize_lossy(n);
    let mut components = vec![vec![T::zero(); n]; k + 2];
    components[k + 1] = contrib.iter().map(|&c| c - psi).collect();
    let eif = EifDecomposition::from_components(weights.label().to_string(), components);
    Ok(EstimateResult::single(EstimatorKind::Ipw, weights.label(), psi, eif, None))
}

/// `D*_t = H_t (Q_{t+1} - Q_t)` for `t >= 1`, `D*_0 = Q_1 - psi`.
pub fn eif_values<T: Scalar>(weights: &RegimeWeights<T>, q: &SequentialQ<T>, psi: T) -> Result<EifDecomposition<T>> {
    let n = q.n();
    if weights.n() != n {
        return Err(Error::Dimension("regime weights and fits have different sizes".into()));
    }
    let top = q.top();
    let levels: Vec<Vec<T>> = (1..=top + 1).map(|t| q.level(t)).collect();
    let mut components = Vec::with_capacity(top + 1);
    components.push(levels[0].iter().map(|&v| v - psi).collect());
    for t in 1..=top {
        let (cur, next) = (&levels[t - 1], &levels[t]);
        components.push((0..n).map(|i| weights.h(t, i) * (next[i] - cur[i])).collect());
    }
    Ok(EifDecomposition::from_components(q.label().to_string(), components))
}

/// AIPW from untargeted fits:
/// `mean(sum_t H_t (Q_{t+1} - Q_t) + Q_1)`.
pub fn aipw_mean<T: Scalar>(weights: &RegimeWeights<T>, q: &SequentialQ<T>) -> Result<EstimateResult<T>> {
    let q = if q.is_targeted() { q.untargeted() } else { q.clone() };
    let zero = eif_values(weights, &q, T::zero())?;
    let psi = zero.mean();
    let eif = eif_values(weights, &q, psi)?;
    Ok(EstimateResult::single(EstimatorKind::Aipw, weights.label(), psi, eif, Some(q)))
}

/// Standard TMLE: each backward regression is targeted before it becomes the
/// dependent variable of the next.
pub fn tmle_mean<T: Scalar>(
    data: &LongitudinalDataset<T>,
    weights: &RegimeWeights<T>,
    spec: &NuisanceSpec,
    submodel: Submodel,
) -> Result<EstimateResult<T>> {
    let q = fit_sequential_q(data, weights, spec, Targeting::Interleaved(submodel))?;
    let psi = q.psi(None);
    let eif = eif_values(weights, &q, psi)?;
    Ok(EstimateResult::single(EstimatorKind::Tmle, weights.label(), psi, eif, Some(q)))
}

/// Modified TMLE: targets frozen initial fits in a separate backward pass.
pub fn modified_tmle_mean<T: Scalar>(
    weights: &RegimeWeights<T>,
    q_initial: &SequentialQ<T>,
    submodel: Submodel,
) -> Result<EstimateResult<T>> {
    let q = target_sequential(q_initial, weights, submodel, None)?;
    let psi = q.psi(None);
    let eif = eif_values(weights, &q, psi)?;
    Ok(EstimateResult::single(EstimatorKind::Mtmle, weights.label(), psi, eif, Some(q)))
}

/// `sum_d w_d psi_d` with EIF `sum_d w_d D*_d`.
pub fn contrast<T: Scalar>(results: &[EstimateResult<T>], weights: &[T]) -> Result<EstimateResult<T>> {
    if results.is_empty() || results.len() != weights.len() {
        return Err(Error::Dimension("one weight per estimate is required".into()));
    }
    let n = results[0].eif.n();
    let times = results[0].eif.components.len();
    if results.iter().any(|r| r.eif.n() != n || r.eif.components.len() != times) {
        return Err(Error::Dimension("contrasted estimates come from different datasets".into()));
    }
    let method = results[0].method;
    let psi_hat = results.iter().zip(weights).fold(T::zero(), |acc, (r, &w)| acc + w * r.psi_hat);
    let components = (0..times)
        .map(|t| {
            (0..n)
                .map(|i| results.iter().zip(weights).fold(T::zero(), |acc, (r, &w)| acc + w * r.eif.components[t][i]))
                .collect()
        })
        .collect();
    let label = results
        .iter()
        .zip(weights)
        .map(|(r, w)| format!("{}{}", if *w < T::zero() { "-" } else { "+" }, r.label))
        .collect::<String>();
    let label = label.trim_start_matches('+').to_string();
    Ok(EstimateResult {
        method,
        psi_hat,
        per_arm: results
            .iter()
            .zip(weights)
            .map(|(r, &w)| ArmEstimate { label: r.label.clone(), weight: w, psi_hat: r.psi_hat })
            .collect(),
        eif: EifDecomposition::from_components(label.clone(), components),
        epsilon_trace: results.iter().flat_map(|r| r.epsilon_trace.iter().cloned()).collect(),
        q: results.iter().flat_map(|r| r.q.iter().cloned()).collect(),
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longdata::{Column, DatasetParts, Regime};
    use crate::nuisance::TreatmentMechanism;

    fn rct() -> LongitudinalDataset<f64> {
        LongitudinalDataset::from_parts(DatasetParts {
            baseline: vec![Column::new("W1", vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])],
            covariates: vec![],
            treatments: vec![vec![1, 1, 1, 1, 0, 0, 0, 0]],
            outcome: vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            outcome_range: None,
            event: None,
        })
        .unwrap()
    }

    fn spec() -> NuisanceSpec {
        NuisanceSpec::default().with_formulas("1", "W1").unwrap()
    }

    #[test]
    fn ipw_in_rct() {
        let d = rct();
        let g = TreatmentMechanism::from_probabilities(&d, vec![vec![0.5; 8]], 0.0).unwrap();
        let w = RegimeWeights::new(&d, &g, &Regime::constant(0, 1)).unwrap();
        let r = ipw_mean(&d, &w).unwrap();
        assert!((r.psi_hat - 0.75).abs() < 1e-12);
        let treated = d.select(&[0, 1, 2, 3]).unwrap();
        let g1 = TreatmentMechanism::from_probabilities(&treated, vec![vec![1.0; 4]], 0.0).unwrap();
        let none = RegimeWeights::new(&treated, &g1, &Regime::constant(0, 0)).unwrap();
        assert_eq!(ipw_mean(&treated, &none).unwrap().psi_hat, 0.0);
    }

    #[test]
    fn saturated_tmle_is_stratified_g_computation() {
        let d = rct();
        let g = TreatmentMechanism::from_probabilities(&d, vec![vec![0.5; 8]], 0.0).unwrap();
        let w = RegimeWeights::new(&d, &g, &Regime::constant(0, 1)).unwrap();
        // strata among treated: W1=0 -> mean 1, W1=1 -> mean 0.5
        for sub in [Submodel::WeightedIntercept, Submodel::CleverCovariate] {
            let r = tmle_mean(&d, &w, &spec(), sub).unwrap();
            assert!((r.psi_hat - 0.75).abs() < 1e-8, "{}", r.psi_hat);
            assert!(r.eif.mean().abs() < 1e-7);
        }
    }

    #[test]
    fn aipw_without_followers_is_g_computation() {
        let d = rct();
        let g = TreatmentMechanism::from_probabilities(&d, vec![vec![0.5; 8]], 0.0).unwrap();
        let w = RegimeWeights::new(&d, &g, &Regime::constant(0, 1)).unwrap();
        let q = fit_sequential_q(&d, &w, &spec(), Targeting::None).unwrap();
        let a = aipw_mean(&w, &q).unwrap();
        assert!((a.psi_hat - 0.75).abs() < 1e-8);
        let m = modified_tmle_mean(&w, &q, Submodel::WeightedIntercept).unwrap();
        assert!(m.eif.mean().abs() < 1e-7);
        assert!(m.eif.components.iter().skip(1).all(|c| c.iter().zip(&d.treatment(0)[..]).all(|(v, &a)| a == 1 || *v == 0.0)));
    }

    #[test]
    fn contrast_of_identical_arms_is_zero() {
        let d = rct();
        let g = TreatmentMechanism::from_probabilities(&d, vec![vec![0.5; 8]], 0.0).unwrap();
        let w = RegimeWeights::new(&d, &g, &Regime::constant(0, 1)).unwrap();
        let r = tmle_mean(&d, &w, &spec(), Submodel::WeightedIntercept).unwrap();
        let c = contrast(&[r.clone(), r], &[1.0, -1.0]).unwrap();
        assert_eq!(c.psi_hat, 0.0);
        assert!(c.eif.total.iter().all(|&v| v == 0.0));
    }
}
