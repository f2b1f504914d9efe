//! Robust EIF variance: `sigma^2 = sum_t E_{P^d}[Z^d(t)]` where
//! `Z^d(t) = (Q_{t+1} - Q_t)^2 / g^d_{0:t-1}`, each mean estimated by its own
//! sequential TMLE, by IPW, or in the conservative plug-in form.

use serde::Serialize;

use super::{Sigma2Component, VarianceMethod, VarianceReport};
use crate::error::{Error, Result};
use crate::glm::{fit_logistic, predict, Design, IrlsOptions};
use crate::longdata::{LongitudinalDataset, OutcomeScale};
use crate::nuisance::{fit_sequential, NuisanceSpec, RegimeWeights, SequentialQ, Submodel, Targeting};
use crate::scalar::{expit, logit, Scalar};

/// Observed variance pseudo-outcome `Z^d(t)` for every subject (zero for
/// subjects not following the regime through `t - 1`).
#[derive(Debug, Clone, Serialize)]
pub struct VarianceZOutcome<T> {
    pub regime: String,
    pub t: usize,
    pub values: Vec<T>,
}

/// `Z^d(t)` from targeted fits; at `t = 0` it is `(Q_1 - psi)^2`.
pub fn build_variance_outcome<T: Scalar>(
    weights: &RegimeWeights<T>,
    q: &SequentialQ<T>,
    psi: T,
    t: usize,
) -> Result<VarianceZOutcome<T>> {
    if t > q.top() {
        return Err(Error::TimeIndex { t, max: q.top() });
    }
    let values = if t == 0 {
        q.level(1).into_iter().map(|v| (v - psi) * (v - psi)).collect()
    } else {
        let (cur, next) = (q.level(t), q.level(t + 1));
        let inv = weights.inverse(t);
        (0..q.n())
            .map(|i| {
                if weights.follows(t, i) {
                    let d = next[i] - cur[i];
                    d * d * inv[i]
                } else {
                    T::zero()
                }
            })
            .collect()
    };
    Ok(VarianceZOutcome { regime: q.label().to_string(), t, values })
}

/// Bounds `(0, max Z (1 + 1e-3))`, or `None` when `Z` is identically zero.
fn z_scale<T: Scalar>(z: &[T]) -> Result<Option<OutcomeScale<T>>> {
    let max = z.iter().fold(T::zero(), |m, &v| m.max(v));
    if max <= T::zero() {
        return Ok(None);
    }
    Ok(Some(OutcomeScale::new(T::zero(), max * (T::one() + T::lit(1e-3)))?))
}

/// Sequential TMLE of `E_{P^d} Z^d(t)` using the weighted-intercept submodel.
pub fn robust_sigma2_t_tmle<T: Scalar>(
    data: &LongitudinalDataset<T>,
    weights: &RegimeWeights<T>,
    spec: &NuisanceSpec,
    z: &VarianceZOutcome<T>,
) -> Result<T> {
    if z.t == 0 {
        return Ok(z.values.iter().copied().sum::<T>() / T::from_usize_lossy(z.values.len()));
    }
    let Some(scale) = z_scale(&z.values)? else {
        return Ok(T::zero());
    };
    let q = fit_sequential(
        data,
        weights,
        spec,
        &z.values,
        z.t,
        scale,
        Targeting::Interleaved(Submodel::WeightedIntercept),
        None,
    )?;
    Ok(q.psi(None).max(T::zero()))
}

/// `(1/n) sum_i H_t(i) Z_i`.
pub fn robust_sigma2_t_ipw<T: Scalar>(weights: &RegimeWeights<T>, z: &VarianceZOutcome<T>) -> T {
    let n = z.values.len();
    let s = (0..n).map(|i| weights.h(z.t, i) * z.values[i]).sum::<T>();
    s / T::from_usize_lossy(n)
}

/// Plug-in form: the pseudo-outcome `Z^d(t)` is formed for every subject at
/// risk after node `t - 2` (regime treatments substituted at node `t - 1`) and
/// itself serves as the top-level fit, so only levels `t - 1, ..., 1` are
/// regressed; at `t = 1` this is the plain mean of `Z`. Not consistent for
/// `E_{P^d} Z^d(t)` — the observed outcome of a non-follower does not have the
/// regime's conditional law — and biased upwards where the regime is rare.
pub fn robust_sigma2_t_plugin<T: Scalar>(
    data: &LongitudinalDataset<T>,
    weights: &RegimeWeights<T>,
    spec: &NuisanceSpec,
    q: &SequentialQ<T>,
    t: usize,
) -> Result<T> {
    if t == 0 || t > q.top() {
        return Err(Error::TimeIndex { t, max: q.top() });
    }
    let (cur, next) = (q.level(t), q.level(t + 1));
    let inv = weights.inverse(t);
    let z: Vec<T> = (0..q.n())
        .map(|i| if t == 1 || weights.follows(t - 1, i) { (next[i] - cur[i]) * (next[i] - cur[i]) * inv[i] } else { T::zero() })
        .collect();
    if t == 1 {
        return Ok(z.iter().copied().sum::<T>() / T::from_usize_lossy(z.len()));
    }
    let Some(scale) = z_scale(&z)? else {
        return Ok(T::zero());
    };
    let fit = fit_sequential(data, weights, spec, &z, t - 1, scale, Targeting::Interleaved(Submodel::WeightedIntercept), None)?;
    Ok(fit.psi(None).max(T::zero()))
}

/// Estimator of each component `sigma^2_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustMethod {
    /// Sequential TMLE of `E_{P^d} Z^d(t)`; consistent.
    Tmle,
    /// IPW of `E_{P^d} Z^d(t)`.
    Ipw,
    /// See [`robust_sigma2_t_plugin`]; conservative under sparsity.
    PlugIn,
}

impl RobustMethod {
    pub fn kind(self) -> VarianceMethod {
        match self {
            RobustMethod::Tmle => VarianceMethod::RobustTmle,
            RobustMethod::Ipw => VarianceMethod::RobustIpw,
            RobustMethod::PlugIn => VarianceMethod::RobustPlugIn,
        }
    }
}

/// One regime of a (possibly contrasted) target with its targeted fits.
#[derive(Debug, Clone, Copy)]
pub struct RobustArm<'a, T> {
    pub weights: &'a RegimeWeights<T>,
    /// Targeted outcome fits.
    pub q: &'a SequentialQ<T>,
    pub psi: T,
    pub coef: T,
}

fn check_disjoint<T: Scalar>(arms: &[RobustArm<'_, T>]) -> Result<()> {
    for (a, first) in arms.iter().enumerate() {
        for second in &arms[a + 1..] {
            if (0..first.weights.n()).any(|i| first.weights.follows(1, i) && second.weights.follows(1, i)) {
                return Err(Error::Unsupported(format!(
                    "regimes `{}` and `{}` share followers after node 0; cross terms are not handled",
                    first.weights.label(),
                    second.weights.label()
                )));
            }
        }
    }
    Ok(())
}

/// Empirical `t = 0` term `mean((sum_d w_d (Q^d_1 - psi_d))^2)`.
fn baseline_term<T: Scalar>(arms: &[RobustArm<'_, T>]) -> T {
    let n = arms[0].q.n();
    let q1: Vec<Vec<T>> = arms.iter().map(|a| a.q.level(1)).collect();
    let s = (0..n)
        .map(|i| {
            let c = arms.iter().zip(&q1).fold(T::zero(), |acc, (a, q)| acc + a.coef * (q[i] - a.psi));
            c * c
        })
        .sum::<T>();
    s / T::from_usize_lossy(n)
}

/// `var(psi_hat) = [sum_d w_d^2 sum_{t>=1} sigma^2_t(d) + t=0 term] / n`.
///
/// Contrasts are restricted to regimes whose follower sets are disjoint after
/// node 0, so that cross terms vanish for `t >= 1`.
pub fn robust_variance_total<T: Scalar>(
    data: &LongitudinalDataset<T>,
    arms: &[RobustArm<'_, T>],
    spec: &NuisanceSpec,
    method: RobustMethod,
) -> Result<VarianceReport<T>> {
    if arms.is_empty() {
        return Err(Error::Estimation("no regimes given".into()));
    }
    check_disjoint(arms)?;
    let n = data.n();
    let mut components = Vec::new();
    let mut total = T::zero();
    for arm in arms {
        for t in 1..=arm.q.top() {
            let z = build_variance_outcome(arm.weights, arm.q, arm.psi, t)?;
            let value = match method {
                RobustMethod::Tmle => robust_sigma2_t_tmle(data, arm.weights, spec, &z)?,
                RobustMethod::Ipw => robust_sigma2_t_ipw(arm.weights, &z),
                RobustMethod::PlugIn => robust_sigma2_t_plugin(data, arm.weights, spec, arm.q, t)?,
            };
            total += arm.coef * arm.coef * value;
            components.push(Sigma2Component { regime: arm.weights.label().to_string(), t, value });
        }
    }
    let base = baseline_term(arms);
    total += base;
    let mut report = VarianceReport::plain(method.kind(), total / T::from_usize_lossy(n), n);
    report.sigma2_components = components;
    report.baseline_term = Some(base);
    Ok(report)
}

/// Direct point-treatment computation (`K = 0`):
/// `sigma^2 = sum_a w_a^2 E^*[(Y - Q(a, L0))^2 / g(a | L0)] + mean((sum_a w_a (Q(a, L0) - psi_a))^2)`.
///
/// The first mean, per `method`:
/// - `Tmle`: logistic regression of the bounded pseudo-outcome among subjects
///   with `A = a`, one weighted-intercept update with weight `1 / g`, then the
///   average over all subjects;
/// - `Ipw`: `mean(I(A = a) / g * S)`;
/// - `PlugIn`: the pseudo-outcome evaluated at every subject's observed `Y`,
///   averaged (the initial fit is the pseudo-outcome itself, so the update is void).
pub fn point_treatment_variance<T: Scalar>(
    data: &LongitudinalDataset<T>,
    arms: &[RobustArm<'_, T>],
    spec: &NuisanceSpec,
    method: RobustMethod,
) -> Result<VarianceReport<T>> {
    if data.k() != 0 {
        return Err(Error::Unsupported(format!("point-treatment variance needs K = 0, got K = {}", data.k())));
    }
    if arms.is_empty() {
        return Err(Error::Estimation("no regimes given".into()));
    }
    check_disjoint(arms)?;
    let n = data.n();
    let nt = T::from_usize_lossy(n);
    let y = data.outcome();
    let opts = IrlsOptions::default();
    let mut first = T::zero();
    let mut components = Vec::new();
    for arm in arms {
        let a = arm.weights.history.assigned[0].clone();
        let qa = arm.q.level(1);
        let inv = arm.weights.inverse(1);
        let treated: Vec<bool> = (0..n).map(|i| data.treatment(0)[i] == a[i] && data.alive(0, i)).collect();
        let all: Vec<T> = (0..n).map(|i| (y[i] - qa[i]) * (y[i] - qa[i]) * inv[i]).collect();
        let s: Vec<T> = (0..n).map(|i| if treated[i] { all[i] } else { T::zero() }).collect();
        let value = match method {
            RobustMethod::PlugIn => all.iter().copied().sum::<T>() / nt,
            RobustMethod::Ipw => (0..n).map(|i| s[i] * inv[i]).sum::<T>() / nt,
            RobustMethod::Tmle => match z_scale(&s)? {
                None => T::zero(),
                Some(scale) => {
                    let ss = scale.scale(&s)?;
                    let design: Design<T> =
                        spec.q_formula(1)?.compile(data, 0, Some(0))?.design(data, |_, i| a[i]);
                    let w: Vec<T> = treated.iter().map(|&r| if r { T::one() } else { T::zero() }).collect();
                    let fit = fit_logistic(&design, &ss, &w, None, &opts)?;
                    let init = predict(&fit, &design, None)?;
                    let offset: Vec<T> = init.iter().map(|&p| logit(p)).collect();
                    let tw: Vec<T> = (0..n).map(|i| if treated[i] { inv[i] } else { T::zero() }).collect();
                    let eps = fit_logistic(&Design::intercept(n), &ss, &tw, Some(&offset), &opts)?.coefficients[0];
                    let star: Vec<T> =
                        (0..n).map(|i| if eps == T::zero() { init[i] } else { expit(offset[i] + eps) }).collect();
                    let m = scale.unscale(&star).into_iter().sum::<T>() / nt;
                    m.max(T::zero())
                }
            },
        };
        components.push(Sigma2Component { regime: arm.weights.label().to_string(), t: 1, value });
        first += arm.coef * arm.coef * value;
    }
    let base = baseline_term(arms);
    let mut report = VarianceReport::plain(method.kind(), (first + base) / nt, n);
    report.sigma2_components = components;
    report.baseline_term = Some(base);
    Ok(report)
}
