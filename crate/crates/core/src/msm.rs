//! EIF variance components for a working marginal structural model over a
//! set of regimes.
//!
//! With `h1(d, t) = h(d, t) dm/dbeta / (m (1 - m))`, the variance decomposes as
//! `sigma^2 = sum_d E[sum_t h1(d, t) Z_d(d, t)]`, where `Z(d1, t)` combines the
//! conditional covariances `Sigma_t(d1, d2)` of the next-level outcome
//! regressions over every regime `d2` that agrees with `d1` on the history.
//! Static regimes are the supported path; dynamic regimes are accepted only
//! when the spec is marked experimental.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_linear, fit_logistic, predict, predict_linear, IrlsOptions};
use crate::longdata::{LongitudinalDataset, OutcomeScale, Regime};
use crate::nuisance::sequential::{level_designs, row_masks, row_weights, target_level};
use crate::nuisance::{fit_sequential, NuisanceSpec, RegimeWeights, SequentialQ, Submodel, Targeting};
use crate::scalar::{expit, Scalar};
use crate::variance::Sigma2Component;

/// Working model `m_beta(d, t) = expit(beta . x(d, t))` with user weights `h(d, t)`.
#[derive(Debug, Clone)]
pub struct MsmSpec<T> {
    pub regimes: Vec<Regime<T>>,
    /// `h[d][t]`, `t = 0..=K+1`.
    pub h: Vec<Vec<T>>,
    /// `features[d][t]`: working-model covariates `x(d, t)`.
    pub features: Vec<Vec<Vec<T>>>,
    pub beta: Vec<T>,
    /// Coefficient whose gradient direction defines `h1`.
    pub coefficient: usize,
    /// Allow dynamic regimes.
    pub experimental: bool,
}

impl<T: Scalar> MsmSpec<T> {
    /// Intercept-only working model with `h` given per regime and time.
    pub fn intercept_only(regimes: Vec<Regime<T>>, h: Vec<Vec<T>>, beta0: T) -> Self {
        let features = h.iter().map(|row| vec![vec![T::one()]; row.len()]).collect();
        Self { regimes, h, features, beta: vec![beta0], coefficient: 0, experimental: false }
    }

    /// Intercept-only model with `h(d, t) = w_d` at every time.
    pub fn constant_weights(regimes: Vec<Regime<T>>, weights: &[T], k: usize) -> Self {
        let h = weights.iter().map(|&w| vec![w; k + 2]).collect();
        Self::intercept_only(regimes, h, T::zero())
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let nd = self.regimes.len();
        if nd == 0 {
            return Err(Error::Validation("MSM needs at least one regime".into()));
        }
        if self.h.len() != nd || self.features.len() != nd {
            return Err(Error::Dimension(format!("MSM weights/features must have one entry per regime ({nd})")));
        }
        for d in 0..nd {
            if self.h[d].len() != k + 2 || self.features[d].len() != k + 2 {
                return Err(Error::Dimension(format!("MSM weights/features need {} time points", k + 2)));
            }
            if self.h[d].iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                return Err(Error::Validation(format!("MSM weights for `{}` must be finite and >= 0", self.regimes[d].label)));
            }
            if self.features[d].iter().any(|x| x.len() != self.beta.len()) {
                return Err(Error::Dimension("MSM feature vectors must match beta".into()));
            }
        }
        if self.coefficient >= self.beta.len() {
            return Err(Error::Validation(format!("coefficient {} outside beta", self.coefficient)));
        }
        if !self.experimental && self.regimes.iter().any(|r| !r.is_static()) {
            return Err(Error::Unsupported(
                "MSM variance for dynamic regimes is experimental; set `experimental` to enable".into(),
            ));
        }
        Ok(())
    }

    pub fn model_value(&self, d: usize, t: usize) -> T {
        let eta = self.features[d][t].iter().zip(&self.beta).fold(T::zero(), |a, (&x, &b)| a + x * b);
        expit(eta)
    }

    /// `dm/dbeta` at `(d, t)`.
    pub fn gradient(&self, d: usize, t: usize) -> Vec<T> {
        let m = self.model_value(d, t);
        self.features[d][t].iter().map(|&x| m * (T::one() - m) * x).collect()
    }
}

/// `h1(d, t)` for every regime at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct H1Weights<T> {
    pub t: usize,
    pub values: Vec<T>,
}

pub fn h1_weights<T: Scalar>(spec: &MsmSpec<T>, t: usize) -> Result<H1Weights<T>> {
    let values = (0..spec.regimes.len())
        .map(|d| {
            let h = *spec.h[d].get(t).ok_or(Error::TimeIndex { t, max: spec.h[d].len().saturating_sub(1) })?;
            let m = spec.model_value(d, t);
            let v = m * (T::one() - m);
            if !(v > T::epsilon()) {
                return Err(Error::Estimation(format!(
                    "singular MSM weight: m = {m} for `{}` at t = {t}",
                    spec.regimes[d].label
                )));
            }
            Ok(h * spec.gradient(d, t)[spec.coefficient] / v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(H1Weights { t, values })
}

fn h1_table<T: Scalar>(spec: &MsmSpec<T>, k: usize) -> Result<Vec<H1Weights<T>>> {
    (0..=k + 1).map(|t| h1_weights(spec, t)).collect()
}

/// One regime's weights and outcome fits (targeted for the mean parameter).
#[derive(Debug, Clone, Copy)]
pub struct MsmArm<'a, T> {
    pub weights: &'a RegimeWeights<T>,
    pub q: &'a SequentialQ<T>,
    pub psi: T,
}

fn check_arms<T: Scalar>(data: &LongitudinalDataset<T>, spec: &MsmSpec<T>, arms: &[MsmArm<'_, T>]) -> Result<()> {
    spec.validate(data.k())?;
    if arms.len() != spec.regimes.len() {
        return Err(Error::Dimension(format!("{} regimes but {} fitted arms", spec.regimes.len(), arms.len())));
    }
    for (r, a) in spec.regimes.iter().zip(arms) {
        if r.label != a.weights.label() || r.label != a.q.label() {
            return Err(Error::Validation(format!("arm `{}` does not match regime `{}`", a.q.label(), r.label)));
        }
        if a.q.top() != data.k() + 1 || a.q.n() != data.n() {
            return Err(Error::Dimension(format!("fits for `{}` do not cover the dataset outcome", r.label)));
        }
    }
    Ok(())
}

/// Subject-level indicator that `d1` and `d2` assign the same treatments
/// through node `t - 1`.
fn agree<T: Scalar>(a: &RegimeWeights<T>, b: &RegimeWeights<T>, t: usize, i: usize) -> bool {
    (0..t).all(|s| a.history.assigned[s][i] == b.history.assigned[s][i])
}

fn require_binary<T: Scalar>(data: &LongitudinalDataset<T>) -> Result<()> {
    if data.outcome().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::Unsupported("this MSM variance component needs a binary outcome".into()));
    }
    Ok(())
}

fn require_distinct_static<T: Scalar>(spec: &MsmSpec<T>) -> Result<()> {
    use crate::longdata::RegimeKind;
    let mut seen: Vec<&Vec<u8>> = Vec::new();
    for r in &spec.regimes {
        match &r.kind {
            RegimeKind::Static(a) => {
                if seen.contains(&a) {
                    return Err(Error::Validation(format!("static regime `{}` is listed twice", r.label)));
                }
                seen.push(a);
            }
            RegimeKind::Dynamic(_) => {
                return Err(Error::Unsupported(format!("regime `{}` is dynamic; this path needs static regimes", r.label)))
            }
        }
    }
    Ok(())
}

/// Sequential TMLE (weighted-intercept fluctuation) of `E_{P^d}` of a
/// pseudo-outcome known at history time `t - 1`, with bounds taken from its range.
fn regime_mean<T: Scalar>(
    data: &LongitudinalDataset<T>,
    weights: &RegimeWeights<T>,
    nuisance: &NuisanceSpec,
    values: &[T],
    t: usize,
) -> Result<T> {
    let Some(scale) = padded_scale(values.iter().fold(T::zero(), |m, &v| m.min(v)), values.iter().fold(T::zero(), |m, &v| m.max(v)))?
    else {
        return Ok(T::zero());
    };
    let q = fit_sequential(
        data,
        weights,
        nuisance,
        values,
        t,
        scale,
        Targeting::Interleaved(Submodel::WeightedIntercept),
        None,
    )?;
    Ok(q.psi(None))
}

/// `[lo, hi]` widened by `1e-3` of the width on each open side; `None` when empty.
fn padded_scale<T: Scalar>(lo: T, hi: T) -> Result<Option<OutcomeScale<T>>> {
    let width = hi - lo;
    if !(width > T::zero()) {
        return Ok(None);
    }
    let pad = width * T::lit(1e-3);
    let lo = if lo < T::zero() { lo - pad } else { lo };
    Ok(Some(OutcomeScale::new(lo, hi + pad)?))
}

/// Last-time component for static regimes and binary `Y`.
#[derive(Debug, Clone, Serialize)]
pub struct LastComponent<T> {
    /// `E_{P^d}[Q(1 - Q) / g_{0:K}]` per regime, reported at `t = K + 1`.
    pub per_regime: Vec<Sigma2Component<T>>,
    pub h1: Vec<T>,
    pub sigma2: T,
}

/// `Z_1(K+1) = Q_{K+1}(1 - Q_{K+1}) / g_{0:K}` on regime followers, else 0.
fn z1_last<T: Scalar>(data: &LongitudinalDataset<T>, arm: &MsmArm<'_, T>) -> Vec<T> {
    let top = data.k() + 1;
    let q = arm.q.level(top);
    let inv = arm.weights.inverse(top);
    (0..data.n())
        .map(|i| if arm.weights.follows(top, i) { q[i] * (T::one() - q[i]) * inv[i] } else { T::zero() })
        .collect()
}

/// `sigma^2_{K+1} = sum_d h1(d, K+1)^2 E_{P^d}[Q(1 - Q) / g_{0:K}]`.
pub fn sigma2_last_static<T: Scalar>(
    data: &LongitudinalDataset<T>,
    spec: &MsmSpec<T>,
    nuisance: &NuisanceSpec,
    arms: &[MsmArm<'_, T>],
) -> Result<LastComponent<T>> {
    check_arms(data, spec, arms)?;
    require_binary(data)?;
    require_distinct_static(spec)?;
    let top = data.k() + 1;
    let h1 = h1_weights(spec, top)?.values;
    let means = arms
        .par_iter()
        .map(|arm| regime_mean(data, arm.weights, nuisance, &z1_last(data, arm), top))
        .collect::<Result<Vec<_>>>()?;
    let sigma2 = h1.iter().zip(&means).fold(T::zero(), |acc, (&h, &m)| acc + h * h * m);
    let per_regime = arms
        .iter()
        .zip(&means)
        .map(|(a, &value)| Sigma2Component { regime: a.weights.label().to_string(), t: top, value })
        .collect();
    Ok(LastComponent { per_regime, h1, sigma2 })
}

/// Fitted conditional covariance `Sigma_t(d1, d2)` evaluated for every subject
/// at its history with `d1`'s treatments (zero for subjects dead before `t - 1`).
#[derive(Debug, Clone, Serialize)]
pub struct CrossCovariance<T> {
    pub t: usize,
    pub d1: String,
    pub d2: String,
    /// Regression rows: followers of `d1` through `t - 1` on which the rules agree.
    pub rows: Vec<bool>,
    pub values: Vec<T>,
}

fn raw_cross<T: Scalar>(
    data: &LongitudinalDataset<T>,
    nuisance: &NuisanceSpec,
    a1: &MsmArm<'_, T>,
    a2: &MsmArm<'_, T>,
    t: usize,
) -> Result<CrossCovariance<T>> {
    let top = data.k() + 1;
    if t == 0 || t > top {
        return Err(Error::TimeIndex { t, max: top });
    }
    let n = data.n();
    let rows: Vec<bool> = (0..n)
        .map(|i| a1.weights.follows(t, i) && agree(a1.weights, a2.weights, t, i) && data.alive(t - 1, i))
        .collect();
    if !rows.iter().any(|&r| r) {
        return Err(Error::Estimation(format!(
            "no subjects follow both `{}` and `{}` through node {}",
            a1.weights.label(),
            a2.weights.label(),
            t - 1
        )));
    }
    let (c1, n1) = (a1.q.level(t), a1.q.level(t + 1));
    let (c2, n2) = (a2.q.level(t), a2.q.level(t + 1));
    let cross: Vec<T> = (0..n).map(|i| if rows[i] { (n1[i] - c1[i]) * (n2[i] - c2[i]) } else { T::zero() }).collect();
    let w: Vec<T> = rows.iter().map(|&r| if r { T::one() } else { T::zero() }).collect();
    let design =
        nuisance.q_formula(t)?.compile(data, t - 1, Some(t - 1))?.design(data, |s, i| a1.weights.history.assigned[s][i]);
    let fit = fit_linear(&design, &cross, &w)?;
    let mut values = predict_linear(&fit, &design, None)?;
    for (i, v) in values.iter_mut().enumerate() {
        if !data.alive(t - 1, i) {
            *v = T::zero();
        }
    }
    Ok(CrossCovariance { t, d1: a1.weights.label().into(), d2: a2.weights.label().into(), rows, values })
}

fn clamp_cross<T: Scalar>(mut c: CrossCovariance<T>, diag1: &[T], diag2: &[T]) -> CrossCovariance<T> {
    for (i, v) in c.values.iter_mut().enumerate() {
        let bound = (diag1[i].max(T::zero()) * diag2[i].max(T::zero())).sqrt();
        *v = v.max(-bound).min(bound);
    }
    c
}

/// Regression of `(Q^{d1}_{t+1} - Q^{d1}_t)(Q^{d2}_{t+1} - Q^{d2}_t)` on the
/// history through node `t - 1`. Diagonal fits are clamped at zero;
/// off-diagonal fits to the Cauchy-Schwarz bound of the two diagonal fits.
pub fn sigma_t_cross_covariance<T: Scalar>(
    data: &LongitudinalDataset<T>,
    nuisance: &NuisanceSpec,
    a1: &MsmArm<'_, T>,
    a2: &MsmArm<'_, T>,
    t: usize,
) -> Result<CrossCovariance<T>> {
    let raw = raw_cross(data, nuisance, a1, a2, t)?;
    if std::ptr::eq(a1.weights, a2.weights) || a1.weights.label() == a2.weights.label() {
        let mut c = raw;
        c.values.iter_mut().for_each(|v| *v = v.max(T::zero()));
        return Ok(c);
    }
    let d1 = raw_cross(data, nuisance, a1, a1, t)?.values;
    let d2 = raw_cross(data, nuisance, a2, a2, t)?.values;
    Ok(clamp_cross(raw, &d1, &d2))
}

/// `Z(d1, t) = sum_{d2} h1(d2, t) I(d1 = d2 through t - 1) Sigma_t(d1, d2) / g^{d1}_{0:t-1}`
/// on followers of `d1`, zero elsewhere.
fn z_outcome<T: Scalar>(
    data: &LongitudinalDataset<T>,
    arms: &[MsmArm<'_, T>],
    h1: &[T],
    sigma: &[Option<CrossCovariance<T>>],
    d1: usize,
    t: usize,
) -> Vec<T> {
    let w1 = arms[d1].weights;
    let inv = w1.inverse(t);
    (0..data.n())
        .map(|i| {
            if !(w1.follows(t, i) && data.alive(t - 1, i)) {
                return T::zero();
            }
            let s = sigma.iter().enumerate().fold(T::zero(), |acc, (d2, c)| match c {
                Some(c) if agree(w1, arms[d2].weights, t, i) => acc + h1[d2] * c.values[i],
                _ => acc,
            });
            s * inv[i]
        })
        .collect()
}

/// Per-regime sigma-squared contributions and the total.
#[derive(Debug, Clone, Serialize)]
pub struct MsmVarianceReport<T> {
    pub n: usize,
    /// `E[sum_{t >= 1} h1(d, t) Z_d(d, t)]` per regime, reported at `t = 0`.
    pub per_regime: Vec<Sigma2Component<T>>,
    /// Empirical `t = 0` term `mean((sum_d h1(d, 0)(Q^d_1 - psi_d))^2)`.
    pub baseline_term: T,
    pub sigma2: T,
    /// `sigma2 / n`.
    pub variance: T,
    pub experimental: bool,
}

/// Targets `E_{P^d} Zbar_d(d)` with one sequential TMLE: the level-`m`
/// pseudo-outcome is the known increment `h1(d, m) Z(d, m)` plus the targeted
/// remainder from level `m + 1`, fluctuated along `logit R + eps I / g_{0:m-1}`.
fn combined_remainder<T: Scalar>(
    data: &LongitudinalDataset<T>,
    nuisance: &NuisanceSpec,
    weights: &RegimeWeights<T>,
    increments: &[Vec<T>],
) -> Result<T> {
    let top = increments.len();
    let n = data.n();
    let designs = level_designs(data, weights, nuisance, top)?;
    let (rows, settled) = row_masks(data, weights, top);
    let opts = IrlsOptions::default();
    let mut remainder = vec![T::zero(); n];
    for level in (1..=top).rev() {
        let total: Vec<T> = (0..n).map(|i| increments[level - 1][i] + remainder[i]).collect();
        let w = row_weights(&rows[level - 1], None);
        if !w.iter().any(|&v| v > T::zero()) {
            return Err(Error::UnsupportedRegime { regime: weights.label().to_string(), node: level - 1 });
        }
        // Each level gets bounds from its own pseudo-outcome: the targeted
        // remainder can fill the previous level's range.
        let lo = total.iter().fold(T::zero(), |m, &v| m.min(v));
        let hi = total.iter().fold(T::zero(), |m, &v| m.max(v));
        let Some(scale) = padded_scale(lo, hi)? else {
            remainder = total;
            continue;
        };
        let response = scale.scale(&total)?;
        let fit = fit_logistic(&designs[level - 1], &response, &w, None, &opts)?;
        let mut pred = predict(&fit, &designs[level - 1], None)?;
        for (i, p) in pred.iter_mut().enumerate() {
            if settled[level - 1][i] {
                *p = response[i];
            }
        }
        let (star, _) = target_level(
            level,
            &pred,
            &response,
            &w,
            weights.inverse(level),
            &settled[level - 1],
            &response,
            Submodel::CleverCovariate,
        )?;
        remainder = scale.unscale(&star);
    }
    Ok(remainder.iter().copied().sum::<T>() / T::from_usize_lossy(n))
}

/// `sigma^2 = sum_d E[sum_{t=1}^{K+1} h1(d, t) Z_d(d, t)] + t = 0 term`.
pub fn msm_variance_total<T: Scalar>(
    data: &LongitudinalDataset<T>,
    spec: &MsmSpec<T>,
    nuisance: &NuisanceSpec,
    arms: &[MsmArm<'_, T>],
) -> Result<MsmVarianceReport<T>> {
    check_arms(data, spec, arms)?;
    let (n, top, nd) = (data.n(), data.k() + 1, arms.len());
    let h1 = h1_table(spec, data.k())?;

    // Sigma_t(d1, d2) for every pair whose rules coincide on some follower history.
    let mut sigma: Vec<Vec<Vec<Option<CrossCovariance<T>>>>> = Vec::with_capacity(top);
    for t in 1..=top {
        let diag = arms
            .par_iter()
            .map(|a| raw_cross(data, nuisance, a, a, t))
            .collect::<Result<Vec<_>>>()?;
        let mut table: Vec<Vec<Option<CrossCovariance<T>>>> = vec![vec![None; nd]; nd];
        for d1 in 0..nd {
            for d2 in 0..nd {
                if d1 == d2 {
                    let mut c = diag[d1].clone();
                    c.values.iter_mut().for_each(|v| *v = v.max(T::zero()));
                    table[d1][d2] = Some(c);
                    continue;
                }
                let overlap = (0..n).any(|i| {
                    arms[d1].weights.follows(t, i) && agree(arms[d1].weights, arms[d2].weights, t, i)
                });
                if overlap {
                    let raw = raw_cross(data, nuisance, &arms[d1], &arms[d2], t)?;
                    table[d1][d2] = Some(clamp_cross(raw, &diag[d1].values, &diag[d2].values));
                }
            }
        }
        sigma.push(table);
    }

    let per_regime = (0..nd)
        .into_par_iter()
        .map(|d| {
            let increments: Vec<Vec<T>> = (1..=top)
                .map(|t| {
                    let z = z_outcome(data, arms, &h1[t].values, &sigma[t - 1][d], d, t);
                    z.into_iter().map(|v| h1[t].values[d] * v).collect()
                })
                .collect();
            combined_remainder(data, nuisance, arms[d].weights, &increments)
        })
        .collect::<Result<Vec<_>>>()?;

    let q1: Vec<Vec<T>> = arms.iter().map(|a| a.q.level(1)).collect();
    let baseline = (0..n)
        .map(|i| {
            let s = (0..nd).fold(T::zero(), |acc, d| acc + h1[0].values[d] * (q1[d][i] - arms[d].psi));
            s * s
        })
        .sum::<T>()
        / T::from_usize_lossy(n);
    let sigma2 = per_regime.iter().copied().sum::<T>() + baseline;
    Ok(MsmVarianceReport {
        n,
        per_regime: arms
            .iter()
            .zip(&per_regime)
            .map(|(a, &value)| Sigma2Component { regime: a.weights.label().to_string(), t: 0, value })
            .collect(),
        baseline_term: baseline,
        sigma2,
        variance: sigma2 / T::from_usize_lossy(n),
        experimental: spec.regimes.iter().any(|r| !r.is_static()),
    })
}

/// Both routes to `sigma^2_{K+1}`.
#[derive(Debug, Clone, Serialize)]
pub struct InterceptIdentity<T> {
    /// Weighted working-model intercept `sum_d h1 E Z_d / sum_d h1`.
    pub beta0: T,
    pub sum_h1: T,
    pub sigma2_intercept_route: T,
    pub sigma2_direct: T,
    pub holds: bool,
}

pub const INTERCEPT_IDENTITY_TOLERANCE: f64 = 1e-8;

/// Computes `sigma^2_{K+1}` once as `sum_d h1^2 E Z_1d` and once as `beta0 sum_d h1`,
/// where `beta0` is the intercept of the `h1`-weighted projection of the
/// regime means of `Z(d, K+1)`, each estimated by its own TMLE.
pub fn msm_intercept_identity_check<T: Scalar>(
    data: &LongitudinalDataset<T>,
    spec: &MsmSpec<T>,
    nuisance: &NuisanceSpec,
    arms: &[MsmArm<'_, T>],
) -> Result<InterceptIdentity<T>> {
    let direct = sigma2_last_static(data, spec, nuisance, arms)?;
    let top = data.k() + 1;
    let h1 = &direct.h1;
    let sum_h1 = h1.iter().copied().sum::<T>();
    if sum_h1.abs() <= T::epsilon() {
        return Err(Error::Estimation("sum of h1 weights is zero".into()));
    }
    let means = (0..arms.len())
        .into_par_iter()
        .map(|d1| {
            let z1 = z1_last(data, &arms[d1]);
            let z: Vec<T> = (0..data.n())
                .map(|i| {
                    let c = (0..arms.len()).fold(T::zero(), |acc, d2| {
                        if agree(arms[d1].weights, arms[d2].weights, top, i) {
                            acc + h1[d2]
                        } else {
                            acc
                        }
                    });
                    c * z1[i]
                })
                .collect();
            regime_mean(data, arms[d1].weights, nuisance, &z, top)
        })
        .collect::<Result<Vec<_>>>()?;
    let beta0 = h1.iter().zip(&means).fold(T::zero(), |acc, (&h, &m)| acc + h * m) / sum_h1;
    let route = beta0 * sum_h1;
    let tol = T::lit(INTERCEPT_IDENTITY_TOLERANCE) * direct.sigma2.abs().max(T::one());
    Ok(InterceptIdentity {
        beta0,
        sum_h1,
        sigma2_intercept_route: route,
        sigma2_direct: direct.sigma2,
        holds: (route - direct.sigma2).abs() <= tol,
    })
}

/// Config-file form of a static-regime MSM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsmConfig {
    /// Treatment vectors, one per regime.
    pub regimes: Vec<Vec<u8>>,
    #[serde(default)]
    pub labels: Vec<String>,
    /// `h[d][t]`; a single value per regime is broadcast over time.
    pub h: Vec<Vec<f64>>,
    /// `features[d]`: working-model covariates, constant over time. Defaults
    /// to intercept only.
    #[serde(default)]
    pub features: Vec<Vec<f64>>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub coefficient: usize,
}

impl MsmConfig {
    pub fn into_spec<T: Scalar>(&self, k: usize) -> Result<MsmSpec<T>> {
        let nd = self.regimes.len();
        let labels: Vec<String> = if self.labels.is_empty() {
            self.regimes.iter().map(|a| a.iter().map(|v| v.to_string()).collect()).collect()
        } else if self.labels.len() == nd {
            self.labels.clone()
        } else {
            return Err(Error::Config("MSM labels must match regimes".into()));
        };
        let regimes = self.regimes.iter().zip(labels).map(|(a, l)| Regime::fixed(l, a.clone())).collect();
        let h = self
            .h
            .iter()
            .map(|row| match row.len() {
                1 => Ok(vec![T::lit(row[0]); k + 2]),
                l if l == k + 2 => Ok(row.iter().map(|&v| T::lit(v)).collect()),
                l => Err(Error::Config(format!("MSM h rows need 1 or {} entries, got {l}", k + 2))),
            })
            .collect::<Result<Vec<_>>>()?;
        let features = if self.features.is_empty() {
            vec![vec![vec![T::one()]; k + 2]; nd]
        } else {
            self.features.iter().map(|x| vec![x.iter().map(|&v| T::lit(v)).collect(); k + 2]).collect()
        };
        let p = match features.first().and_then(|f: &Vec<Vec<T>>| f.first()) {
            Some(x) => x.len(),
            None => 1,
        };
        let beta = if self.beta.is_empty() { vec![T::zero(); p] } else { self.beta.iter().map(|&b| T::lit(b)).collect() };
        let spec = MsmSpec { regimes, h, features, beta, coefficient: self.coefficient, experimental: false };
        spec.validate(k)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(k: usize) -> Vec<Regime<f64>> {
        vec![Regime::constant(k, 1), Regime::constant(k, 0)]
    }

    #[test]
    fn intercept_only_h1_equals_h() {
        let spec = MsmSpec::intercept_only(two(0), vec![vec![0.3, 2.0], vec![1.0, 0.5]], 0.7);
        assert!((h1_weights(&spec, 1).unwrap().values[0] - 2.0).abs() < 1e-12);
        assert!((h1_weights(&spec, 0).unwrap().values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn h1_matches_finite_difference_gradient() {
        let mut spec = MsmSpec::intercept_only(two(0), vec![vec![1.0; 2]; 2], 0.0);
        spec.features = vec![vec![vec![1.0, 1.0]; 2], vec![vec![1.0, 0.0]; 2]];
        spec.beta = vec![-0.4, 0.9];
        spec.coefficient = 1;
        let h1 = h1_weights(&spec, 1).unwrap();
        let step = 1e-6;
        for d in 0..2 {
            let m = spec.model_value(d, 1);
            let mut up = spec.clone();
            up.beta[1] += step;
            let mut down = spec.clone();
            down.beta[1] -= step;
            let fd = (up.model_value(d, 1) - down.model_value(d, 1)) / (2.0 * step);
            assert!((h1.values[d] - fd / (m * (1.0 - m))).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_model_is_singular() {
        let spec = MsmSpec::intercept_only(two(0), vec![vec![1.0; 2]; 2], 60.0);
        assert!(matches!(h1_weights(&spec, 1), Err(Error::Estimation(_))));
    }

    #[test]
    fn dynamic_regimes_need_the_flag() {
        let dynamic = Regime::dynamic("dyn", |_: &crate::longdata::History<'_, f64>| 1);
        let mut spec = MsmSpec::constant_weights(vec![dynamic], &[1.0], 0);
        assert!(matches!(spec.validate(0), Err(Error::Unsupported(_))));
        spec.experimental = true;
        spec.validate(0).unwrap();
    }

    #[test]
    fn config_broadcasts_weights() {
        let cfg: MsmConfig = serde_json::from_str(r#"{"regimes": [[1,1,1],[0,0,0]], "h": [[1.0],[2.0]]}"#).unwrap();
        let spec = cfg.into_spec::<f64>(2).unwrap();
        assert_eq!(spec.h[1], vec![2.0; 4]);
        assert_eq!(spec.regimes[0].label, "111");
    }
}
