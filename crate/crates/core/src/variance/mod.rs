//! Variance estimators for `psi_hat`: empirical EIF variance, the robust
//! (targeted) EIF variance, the targeting-step bootstrap, their convex
//! combination, Wald inference and sparsity diagnostics.

mod bootstrap;
mod inference;
mod robust;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EifDecomposition;
use crate::scalar::{sample_variance, Scalar};

pub use bootstrap::{bootstrap_targeting_variance, BootstrapArm, BootstrapOptions};
pub use inference::{convex_combo_variance, red_flag_report, wald_inference, RedFlag, WaldInference, RED_FLAG_THRESHOLD};
pub use robust::{
    build_variance_outcome, point_treatment_variance, robust_sigma2_t_ipw, robust_sigma2_t_plugin,
    robust_sigma2_t_tmle,
    robust_variance_total, RobustArm, RobustMethod, VarianceZOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// Sample variance of the estimated EIF.
    #[serde(rename = "eif")]
    EmpiricalEif,
    /// Sum of per-time components in plug-in form: each pseudo-outcome is its
    /// own top-level fit, averaged over all subjects at risk.
    #[serde(rename = "robust")]
    RobustPlugIn,
    /// Per-time components, each a sequential TMLE of the regime-specific mean.
    #[serde(rename = "robust_regime")]
    RobustTmle,
    /// Regime-specific components estimated by inverse probability weighting.
    RobustIpw,
    Bootstrap,
    #[serde(rename = "convex")]
    ConvexCombo,
}

impl VarianceMethod {
    pub const ALL: [VarianceMethod; 6] = [
        VarianceMethod::EmpiricalEif,
        VarianceMethod::RobustPlugIn,
        VarianceMethod::RobustTmle,
        VarianceMethod::RobustIpw,
        VarianceMethod::Bootstrap,
        VarianceMethod::ConvexCombo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VarianceMethod::EmpiricalEif => "eif",
            VarianceMethod::RobustPlugIn => "robust",
            VarianceMethod::RobustTmle => "robust_regime",
            VarianceMethod::RobustIpw => "robust_ipw",
            VarianceMethod::Bootstrap => "bootstrap",
            VarianceMethod::ConvexCombo => "convex",
        }
    }
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variance method `{s}`")))
    }
}

/// One per-time component `sigma^2_t` of a regime.
#[derive(Debug, Clone, Serialize)]
pub struct Sigma2Component<T> {
    pub regime: String,
    pub t: usize,
    pub value: T,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary<T> {
    pub requested: usize,
    pub dropped: usize,
    /// More than the tolerated share of replicates was dropped.
    pub flagged: bool,
    pub draws: Vec<T>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport<T> {
    pub method: VarianceMethod,
    /// Variance of the estimator (EIF variance divided by `n`).
    pub variance_of_psi_hat: T,
    pub n: usize,
    /// Robust methods: per-regime, per-time components for `t >= 1`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sigma2_components: Vec<Sigma2Component<T>>,
    /// Robust methods: empirical `t = 0` term (including the contrast cross term).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_term: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSummary<T>>,
    /// Convex combination: weight on the empirical estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<T>,
    /// The estimate sits on a boundary case (e.g. a zero denominator).
    pub degenerate: bool,
}

impl<T: Scalar> VarianceReport<T> {
    pub(crate) fn plain(method: VarianceMethod, variance: T, n: usize) -> Self {
        Self {
            method,
            variance_of_psi_hat: variance,
            n,
            sigma2_components: Vec::new(),
            baseline_term: None,
            bootstrap: None,
            alpha: None,
            degenerate: false,
        }
    }

    pub fn std_error(&self) -> T {
        self.variance_of_psi_hat.max(T::zero()).sqrt()
    }
}

/// Sample variance of the per-subject EIF divided by `n`.
pub fn empirical_eif_variance<T: Scalar>(eif: &EifDecomposition<T>) -> Result<VarianceReport<T>> {
    let n = eif.n();
    if n < 2 {
        return Err(Error::Estimation(format!("empirical variance needs at least 2 subjects, got {n}")));
    }
    let v = sample_variance(&eif.total) / T::from_usize_lossy(n);
    Ok(VarianceReport::plain(VarianceMethod::EmpiricalEif, v, n))
}
