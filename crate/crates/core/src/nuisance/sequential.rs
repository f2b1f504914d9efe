//! Sequential (iterated conditional expectation) regressions of a terminal
//! pseudo-outcome under a regime, with optional targeting.
//!
//! Level `t` (`1 <= t <= top`) regresses the level `t + 1` values on the
//! history through `L(t-1)` among subjects following the regime through
//! `A(t-1)` and still alive at `t - 1`. Predictions are produced for every
//! subject with treatments set to the regime. Subjects dead before the
//! level's history time keep their terminal value.

use log::warn;
use serde::{Deserialize, Serialize};

use super::{NuisanceSpec, RegimeWeights};
use crate::error::{Error, Result};
use crate::glm::{fit_logistic, predict, Design, GlmFit, IrlsOptions};
use crate::longdata::{LongitudinalDataset, OutcomeScale};
use crate::scalar::{expit, logit, Scalar};

/// Fluctuation used by a targeting update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodel {
    /// `logit Q(eps) = logit Q + eps`, observation weight `H_t`.
    WeightedIntercept,
    /// `logit Q(eps) = logit Q + eps H_t`, unweighted.
    CleverCovariate,
}

/// Whether targeting is interleaved with the backward regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targeting {
    None,
    Interleaved(Submodel),
}

/// One fitted fluctuation parameter.
#[derive(Debug, Clone, Serialize)]
pub struct TargetingStep<T> {
    pub level: usize,
    pub epsilon: T,
    pub converged: bool,
    /// The fit failed to converge and was worse than `eps = 0`, which was used instead.
    pub fell_back: bool,
}

/// Sequential regression fits for one regime and one terminal pseudo-outcome.
#[derive(Debug, Clone)]
pub struct SequentialQ<T> {
    label: String,
    scale: OutcomeScale<T>,
    top: usize,
    /// Terminal values on the unit scale.
    terminal: Vec<T>,
    /// `initial[t - 1]`: untargeted fit at level `t`, unit scale.
    initial: Vec<Vec<T>>,
    targeted: Option<Vec<Vec<T>>>,
    /// `rows[t - 1][i]`: subject `i` enters the level-`t` regression.
    rows: Vec<Vec<bool>>,
    /// `settled[t - 1][i]`: value at level `t` is the terminal value.
    settled: Vec<Vec<bool>>,
    fits: Vec<GlmFit<T>>,
    steps: Vec<TargetingStep<T>>,
    submodel: Option<Submodel>,
}

impl<T: Scalar> SequentialQ<T> {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn scale(&self) -> &OutcomeScale<T> {
        &self.scale
    }

    /// Highest regression level.
    pub fn top(&self) -> usize {
        self.top
    }

    pub fn n(&self) -> usize {
        self.terminal.len()
    }

    pub fn is_targeted(&self) -> bool {
        self.targeted.is_some()
    }

    pub fn submodel(&self) -> Option<Submodel> {
        self.submodel
    }

    /// Untargeted regression fits, indexed by `level - 1`.
    pub fn fits(&self) -> &[GlmFit<T>] {
        &self.fits
    }

    pub fn steps(&self) -> &[TargetingStep<T>] {
        &self.steps
    }

    pub fn rows(&self, level: usize) -> &[bool] {
        &self.rows[level - 1]
    }

    fn check_level(&self, level: usize) {
        assert!(level >= 1 && level <= self.top + 1, "level {level} outside 1..={}", self.top + 1);
    }

    /// Terminal pseudo-outcome on its original scale.
    pub fn terminal(&self) -> Vec<T> {
        self.scale.unscale(&self.terminal)
    }

    /// Untargeted values at `level` (`top + 1` is the terminal), original scale.
    pub fn initial_level(&self, level: usize) -> Vec<T> {
        self.check_level(level);
        if level == self.top + 1 {
            return self.terminal();
        }
        self.scale.unscale(&self.initial[level - 1])
    }

    /// Targeted values if targeting was run, else the initial values.
    pub fn level(&self, level: usize) -> Vec<T> {
        self.check_level(level);
        if level == self.top + 1 {
            return self.terminal();
        }
        match &self.targeted {
            Some(q) => self.scale.unscale(&q[level - 1]),
            None => self.scale.unscale(&self.initial[level - 1]),
        }
    }

    /// Mean of the level-1 values, optionally weighted by resampling counts.
    pub fn psi(&self, counts: Option<&[T]>) -> T {
        let q1 = self.level(1);
        match counts {
            None => q1.iter().copied().sum::<T>() / T::from_usize_lossy(q1.len()),
            Some(c) => {
                let total: T = c.iter().copied().sum();
                q1.iter().zip(c).map(|(&q, &w)| q * w).sum::<T>() / total
            }
        }
    }

    /// Copy with targeted values replaced by the initial fits.
    pub fn untargeted(&self) -> Self {
        Self { targeted: None, steps: Vec::new(), submodel: None, ..self.clone() }
    }
}

/// Q-regression designs for levels `1..=top`, with treatment columns set to
/// the regime.
pub(crate) fn level_designs<T: Scalar>(
    data: &LongitudinalDataset<T>,
    weights: &RegimeWeights<T>,
    spec: &NuisanceSpec,
    top: usize,
) -> Result<Vec<Design<T>>> {
    (1..=top)
        .map(|level| {
            let compiled = spec.q_formula(level)?.compile(data, level - 1, Some(level - 1))?;
            Ok(compiled.design(data, |s, i| weights.history.assigned[s][i]))
        })
        .collect()
}

pub(crate) fn row_masks<T: Scalar>(
    data: &LongitudinalDataset<T>,
    weights: &RegimeWeights<T>,
    top: usize,
) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let n = data.n();
    let rows = (1..=top).map(|t| (0..n).map(|i| weights.follows(t, i) && data.alive(t - 1, i)).collect()).collect();
    let settled = (1..=top).map(|t| (0..n).map(|i| !data.alive(t - 1, i)).collect()).collect();
    (rows, settled)
}

pub(crate) fn row_weights<T: Scalar>(rows: &[bool], counts: Option<&[T]>) -> Vec<T> {
    rows.iter()
        .enumerate()
        .map(|(i, &r)| match (r, counts) {
            (false, _) => T::zero(),
            (true, None) => T::one(),
            (true, Some(c)) => c[i],
        })
        .collect()
}

/// Fits the outcome regressions `Q_{K+1}, ..., Q_1` for the dataset outcome.
pub fn fit_sequential_q<T: Scalar>(
    data: &LongitudinalDataset<T>,
    weights: &RegimeWeights<T>,
    spec: &NuisanceSpec,
    targeting: Targeting,
) -> Result<SequentialQ<T>> {
    let scale = match data.outcome_range() {
        Some(s) => *s,
        None => OutcomeScale::from_values(data.outcome())?,
    };
    fit_sequential(data, weights, spec, data.outcome(), data.k() + 1, scale, targeting, None)
}

/// Sequential regressions of an arbitrary terminal pseudo-outcome placed at
/// level `top + 1`, run from level `top` down to 1.
#[allow(clippy::too_many_arguments)]
pub fn fit_sequential<T: Scalar>(
    data: &LongitudinalDataset<T>,
    weights: &RegimeWeights<T>,
    spec: &NuisanceSpec,
    terminal: &[T],
    top: usize,
    scale: OutcomeScale<T>,
    targeting: Targeting,
    counts: Option<&[T]>,
) -> Result<SequentialQ<T>> {
    let n = data.n();
    if terminal.len() != n || counts.is_some_and(|c| c.len() != n) {
        return Err(Error::Dimension(format!("terminal/count vectors must have {n} entries")));
    }
    if top == 0 || top > data.k() + 1 {
        return Err(Error::TimeIndex { t: top, max: data.k() + 1 });
    }
    let designs = level_designs(data, weights, spec, top)?;
    let (rows, settled) = row_masks(data, weights, top);
    let terminal = scale.scale(terminal)?;
    let opts = IrlsOptions::default();

    let mut initial = vec![Vec::new(); top];
    let mut targeted = vec![Vec::new(); top];
    let mut fits = Vec::with_capacity(top);
    let mut steps = Vec::new();
    let mut current = terminal.clone();
    for level in (1..=top).rev() {
        let w = row_weights(&rows[level - 1], counts);
        if !w.iter().any(|&v| v > T::zero()) {
            return Err(Error::UnsupportedRegime { regime: weights.label().to_string(), node: level - 1 });
        }
        let fit = fit_logistic(&designs[level - 1], &current, &w, None, &opts)?;
        if !fit.converged {
            warn!("outcome regression at level {level} for `{}` did not converge", weights.label());
        }
        let mut pred = predict(&fit, &designs[level - 1], None)?;
        for (i, p) in pred.iter_mut().enumerate() {
            if settled[level - 1][i] {
                *p = terminal[i];
            }
        }
        fits.push(fit);
        current = match targeting {
            Targeting::None => pred.clone(),
            Targeting::Interleaved(sub) => {
                let (star, step) = target_level(
                    level,
                    &pred,
                    &current,
                    &w,
                    weights.inverse(level),
                    &settled[level - 1],
                    &terminal,
                    sub,
                )?;
                steps.push(step);
                targeted[level - 1] = star.clone();
                star
            }
        };
        initial[level - 1] = pred;
    }
    fits.reverse();
    let submodel = match targeting {
        Targeting::None => None,
        Targeting::Interleaved(s) => Some(s),
    };
    Ok(SequentialQ {
        label: weights.label().to_string(),
        scale,
        top,
        terminal,
        initial,
        targeted: submodel.map(|_| targeted),
        rows,
        settled,
        fits,
        steps,
        submodel,
    })
}

/// Runs only the targeting updates on frozen initial fits: at each level the
/// initial fit is the offset and the previous targeted fit is the dependent
/// variable. `counts` reweights subjects (bootstrap resampling).
pub fn target_sequential<T: Scalar>(
    q: &SequentialQ<T>,
    weights: &RegimeWeights<T>,
    submodel: Submodel,
    counts: Option<&[T]>,
) -> Result<SequentialQ<T>> {
    if weights.n() != q.n() || counts.is_some_and(|c| c.len() != q.n()) {
        return Err(Error::Dimension("regime weights or counts do not match the fits".into()));
    }
    let mut targeted = vec![Vec::new(); q.top];
    let mut steps = Vec::with_capacity(q.top);
    let mut current = q.terminal.clone();
    for level in (1..=q.top).rev() {
        let w = row_weights(&q.rows[level - 1], counts);
        if !w.iter().any(|&v| v > T::zero()) {
            return Err(Error::UnsupportedRegime { regime: q.label.clone(), node: level - 1 });
        }
        let (star, step) = target_level(
            level,
            &q.initial[level - 1],
            &current,
            &w,
            weights.inverse(level),
            &q.settled[level - 1],
            &q.terminal,
            submodel,
        )?;
        steps.push(step);
        targeted[level - 1] = star.clone();
        current = star;
    }
    Ok(SequentialQ { targeted: Some(targeted), steps, submodel: Some(submodel), ..q.clone() })
}

fn binomial_loss<T: Scalar>(y: &[T], w: &[T], offset: &[T], cov: &[T], eps: T) -> T {
    let mut loss = T::zero();
    for i in 0..y.len() {
        if w[i] == T::zero() {
            continue;
        }
        let eta = offset[i] + eps * cov[i];
        let sp = |x: T| x.max(T::zero()) + (-x.abs()).exp().ln_1p();
        loss += w[i] * (y[i] * sp(-eta) + (T::one() - y[i]) * sp(eta));
    }
    loss
}

/// One fluctuation at `level`. Returns targeted values for every subject.
#[allow(clippy::too_many_arguments)]
pub(crate) fn target_level<T: Scalar>(
    level: usize,
    initial: &[T],
    response: &[T],
    row_w: &[T],
    inverse: &[T],
    settled: &[bool],
    terminal: &[T],
    submodel: Submodel,
) -> Result<(Vec<T>, TargetingStep<T>)> {
    let n = initial.len();
    let offset: Vec<T> = initial.iter().map(|&p| logit(p)).collect();
    let (w, cov): (Vec<T>, Vec<T>) = match submodel {
        Submodel::WeightedIntercept => {
            ((0..n).map(|i| if row_w[i] > T::zero() { row_w[i] * inverse[i] } else { T::zero() }).collect(), vec![T::one(); n])
        }
        Submodel::CleverCovariate => (row_w.to_vec(), inverse.to_vec()),
    };
    let mut step = TargetingStep { level, epsilon: T::zero(), converged: true, fell_back: false };
    if w.iter().any(|&v| v > T::zero()) {
        let design = Design::new(n, 1, cov.clone())?;
        let fit = fit_logistic(&design, response, &w, Some(&offset), &IrlsOptions::default())?;
        let eps = fit.coefficients[0];
        step.epsilon = eps;
        step.converged = fit.converged;
        if !fit.converged {
            if binomial_loss(response, &w, &offset, &cov, eps) > binomial_loss(response, &w, &offset, &cov, T::zero()) {
                warn!("targeting at level {level} did not converge and does not improve on eps = 0; using eps = 0");
                step.epsilon = T::zero();
                step.fell_back = true;
            } else {
                warn!("targeting at level {level} did not converge; keeping eps = {eps}");
            }
        }
    }
    let eps = step.epsilon;
    let star = (0..n)
        .map(|i| {
            if settled[i] {
                terminal[i]
            } else if eps == T::zero() {
                initial[i]
            } else {
                expit(offset[i] + eps * cov[i])
            }
        })
        .collect();
    Ok((star, step))
}
