//! Wald intervals, the convex-combination variance and red-flag diagnostics.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{VarianceMethod, VarianceReport};
use crate::error::{Error, Result};
use crate::nuisance::RegimeWeights;
use crate::scalar::Scalar;

/// Default robust/empirical variance ratio above which a red flag is raised.
/// An operational choice, not a statistical threshold.
pub const RED_FLAG_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldInference {
    pub psi_hat: f64,
    pub std_error: f64,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    /// Two-sided p-value for `psi = 0`.
    pub p_value: f64,
}

impl WaldInference {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// `psi_hat +- z_{1 - alpha/2} sqrt(var)` and the two-sided Wald test of zero.
pub fn wald_inference<T: Scalar>(psi_hat: T, report: &VarianceReport<T>, level: f64) -> Result<WaldInference> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} must lie in (0, 1)")));
    }
    let var = report.variance_of_psi_hat.as_f64();
    if !(var >= 0.0) {
        return Err(Error::Estimation(format!("invalid variance {var}")));
    }
    let psi = psi_hat.as_f64();
    let normal = Normal::standard();
    let z = normal.inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let se = var.sqrt();
    let p_value = if se > 0.0 {
        2.0 * normal.sf((psi / se).abs())
    } else if psi == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(WaldInference { psi_hat: psi, std_error: se, level, lower: psi - z * se, upper: psi + z * se, p_value })
}

/// `alpha e + (1 - alpha) r` with `alpha = |r - e| / (r + e)`.
pub fn convex_combo_variance<T: Scalar>(
    empirical: &VarianceReport<T>,
    robust: &VarianceReport<T>,
) -> Result<VarianceReport<T>> {
    if empirical.n != robust.n {
        return Err(Error::Dimension("variance reports are on different sample sizes".into()));
    }
    let (e, r) = (empirical.variance_of_psi_hat, robust.variance_of_psi_hat);
    let mut report = VarianceReport::plain(VarianceMethod::ConvexCombo, r, robust.n);
    let denom = r + e;
    if denom <= T::zero() {
        report.degenerate = true;
        report.alpha = Some(T::zero());
        return Ok(report);
    }
    let alpha = (r - e).abs() / denom;
    report.alpha = Some(alpha);
    report.variance_of_psi_hat = alpha * e + (T::one() - alpha) * r;
    report.degenerate = alpha == T::one();
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct RedFlag {
    /// Robust over empirical variance.
    pub ratio: f64,
    pub threshold: f64,
    pub flagged: bool,
    /// Largest per-regime share of final-node followers with truncated weights.
    pub truncated_fraction: f64,
    pub max_clever_weight: f64,
    pub note: &'static str,
}

/// Sparsity diagnostics from the empirical and robust variance estimates.
pub fn red_flag_report<T: Scalar>(
    empirical: &VarianceReport<T>,
    robust: &VarianceReport<T>,
    regimes: &[&RegimeWeights<T>],
    threshold: f64,
) -> RedFlag {
    let (e, r) = (empirical.variance_of_psi_hat.as_f64(), robust.variance_of_psi_hat.as_f64());
    let ratio = if e > 0.0 {
        r / e
    } else if r > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    let truncated_fraction =
        regimes.iter().map(|w| w.truncated_fraction(w.k() + 1)).fold(0.0, f64::max);
    let max_clever_weight = regimes.iter().map(|w| w.max_weight().as_f64()).fold(0.0, f64::max);
    RedFlag {
        ratio,
        threshold,
        flagged: ratio > threshold,
        truncated_fraction,
        max_clever_weight,
        note: "threshold is an operational default",
    }
}
