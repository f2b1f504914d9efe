//! Treatment mechanism `g`, cumulative treatment probabilities and clever
//! weights `H_t`.

use log::warn;
use serde::Serialize;

use super::NuisanceSpec;
use crate::error::{Error, Result};
use crate::glm::{fit_logistic, predict, GlmFit, IrlsOptions};
use crate::longdata::{LongitudinalDataset, Regime, RegimeHistory};
use crate::scalar::Scalar;

/// How `P(A(t) = 1 | past)` was obtained at one node.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeModel<T> {
    Fitted { formula: String, at_risk: usize, fit: GlmFit<T> },
    /// Every at-risk subject had the same treatment.
    Degenerate { value: u8, at_risk: usize },
    /// No subject at risk (all dead or already treated).
    Deterministic,
    /// Probabilities supplied by the caller.
    Known,
}

impl<T> NodeModel<T> {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, NodeModel::Degenerate { .. })
    }
}

/// Fitted treatment mechanism, shared by every regime evaluated on a dataset.
#[derive(Debug, Clone)]
pub struct TreatmentMechanism<T> {
    nodes: Vec<NodeModel<T>>,
    /// `p1[t][i] = P(A(t) = 1 | observed past of i)`.
    p1: Vec<Vec<T>>,
    /// `observed[t][i] = g_{0:t-1}` at the observed treatments, `t = 0..=K+1`.
    observed: Vec<Vec<T>>,
    truncation: T,
}

impl<T: Scalar> TreatmentMechanism<T> {
    /// Mechanism from known per-node probabilities `p1[t][i]`.
    pub fn from_probabilities(data: &LongitudinalDataset<T>, p1: Vec<Vec<T>>, truncation: T) -> Result<Self> {
        if p1.len() != data.k() + 1 || p1.iter().any(|p| p.len() != data.n()) {
            return Err(Error::Dimension(format!(
                "expected {} nodes of {} probabilities",
                data.k() + 1,
                data.n()
            )));
        }
        if let Some(p) = p1.iter().flatten().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(Error::Validation(format!("treatment probability {p} outside [0, 1]")));
        }
        let nodes = (0..p1.len()).map(|_| NodeModel::Known).collect();
        Self::assemble(data, nodes, p1, truncation)
    }

    fn assemble(data: &LongitudinalDataset<T>, nodes: Vec<NodeModel<T>>, p1: Vec<Vec<T>>, truncation: T) -> Result<Self> {
        if !(truncation >= T::zero() && truncation < T::one()) {
            return Err(Error::Config(format!("truncation level {truncation} must lie in [0, 1)")));
        }
        let (n, k) = (data.n(), data.k());
        let mut observed = Vec::with_capacity(k + 2);
        observed.push(vec![T::one(); n]);
        for t in 0..=k {
            let a = data.treatment(t);
            let next: Vec<T> = (0..n)
                .map(|i| observed[t][i] * if a[i] == 1 { p1[t][i] } else { T::one() - p1[t][i] })
                .collect();
            observed.push(next);
        }
        Ok(Self { nodes, p1, observed, truncation })
    }

    pub fn k(&self) -> usize {
        self.p1.len() - 1
    }

    pub fn n(&self) -> usize {
        self.p1[0].len()
    }

    pub fn nodes(&self) -> &[NodeModel<T>] {
        &self.nodes
    }

    pub fn truncation(&self) -> T {
        self.truncation
    }

    /// Same fits with a different truncation level.
    pub fn with_truncation(mut self, truncation: T) -> Result<Self> {
        if !(truncation >= T::zero() && truncation < T::one()) {
            return Err(Error::Config(format!("truncation level {truncation} must lie in [0, 1)")));
        }
        self.truncation = truncation;
        Ok(self)
    }

    /// `P(A(t) = 1 | past)` for every subject.
    pub fn p1(&self, t: usize) -> &[T] {
        &self.p1[t]
    }

    /// `P(A(t) = a | past)` for subject `i`.
    #[inline]
    pub fn prob(&self, t: usize, i: usize, a: u8) -> T {
        if a == 1 {
            self.p1[t][i]
        } else {
            T::one() - self.p1[t][i]
        }
    }

    /// Untruncated `g_{0:t-1}` at the observed treatments, `t = 0..=K+1`.
    pub fn cumulative_observed(&self, t: usize) -> &[T] {
        &self.observed[t]
    }

    /// Share of subjects whose observed cumulative probability through node
    /// `t` (`g_{0:t}`) falls below the truncation level, `t = 0..=K`.
    pub fn truncated_fraction(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.observed[1..]
            .iter()
            .map(|g| g.iter().filter(|&&v| v < self.truncation).count() as f64 / n)
            .collect()
    }
}

/// Fits `g_t(A(t) | past)` at every node by logistic regression among the
/// subjects at risk of a random treatment decision.
///
/// Dead subjects (terminal event already observed) carry their treatment
/// forward with probability one. Under a counting-process convention,
/// subjects already treated stay treated with probability one.
pub fn fit_g<T: Scalar>(data: &LongitudinalDataset<T>, spec: &NuisanceSpec) -> Result<TreatmentMechanism<T>> {
    let (n, k) = (data.n(), data.k());
    let opts = IrlsOptions::default();
    let mut nodes = Vec::with_capacity(k + 1);
    let mut p1 = Vec::with_capacity(k + 1);
    for t in 0..=k {
        let a = data.treatment(t);
        let prev = (t > 0).then(|| data.treatment(t - 1));
        if spec.counting_process {
            if let Some(prev) = prev {
                if let Some(i) = (0..n).find(|&i| prev[i] == 1 && a[i] == 0) {
                    return Err(Error::Validation(format!(
                        "treatment is not monotone for subject {i} at node {t}"
                    )));
                }
            }
        }
        let forced = |i: usize| -> Option<u8> {
            if !data.alive(t, i) {
                return Some(a[i]);
            }
            match prev {
                Some(p) if spec.counting_process && p[i] == 1 => Some(1),
                _ => None,
            }
        };
        let at_risk: Vec<usize> = (0..n).filter(|&i| forced(i).is_none()).collect();
        let mut probs = vec![T::zero(); n];
        let node = if at_risk.is_empty() {
            NodeModel::Deterministic
        } else if at_risk.iter().all(|&i| a[i] == a[at_risk[0]]) {
            let value = a[at_risk[0]];
            warn!("treatment node {t}: all {} at-risk subjects have A{t} = {value}; using a degenerate fit", at_risk.len());
            probs.iter_mut().for_each(|p| *p = T::from_u8(value).unwrap_or_else(T::zero));
            NodeModel::Degenerate { value, at_risk: at_risk.len() }
        } else {
            let formula = spec.g_formula(t)?;
            let compiled = formula.compile(data, t, t.checked_sub(1))?;
            let design = compiled.design(data, |s, i| data.treatment(s)[i]);
            let y: Vec<T> = a.iter().map(|&v| T::from_u8(v).unwrap_or_else(T::zero)).collect();
            let mut w = vec![T::zero(); n];
            for &i in &at_risk {
                w[i] = T::one();
            }
            let fit = fit_logistic(&design, &y, &w, None, &opts)?;
            if !fit.converged {
                warn!("treatment model at node {t} did not converge after {} iterations", fit.iterations);
            }
            probs = predict(&fit, &design, None)?;
            NodeModel::Fitted { formula: formula.to_string(), at_risk: at_risk.len(), fit }
        };
        for (i, p) in probs.iter_mut().enumerate() {
            if let Some(v) = forced(i) {
                *p = T::from_u8(v).unwrap_or_else(T::zero);
            }
        }
        nodes.push(node);
        p1.push(probs);
    }
    TreatmentMechanism::assemble(data, nodes, p1, T::lit(spec.truncation))
}

/// Regime-specific cumulative probabilities and clever weights.
#[derive(Debug, Clone)]
pub struct RegimeWeights<T> {
    pub history: RegimeHistory,
    /// `cumulative[t][i] = g_{0:t-1}` with treatments set to the regime,
    /// `t = 0..=K+1`. Equals the observed product for followers.
    cumulative: Vec<Vec<T>>,
    /// `1 / max(cumulative, truncation)` regardless of follower status.
    inverse: Vec<Vec<T>>,
    truncation: T,
}

impl<T: Scalar> RegimeWeights<T> {
    pub fn new(data: &LongitudinalDataset<T>, mech: &TreatmentMechanism<T>, regime: &Regime<T>) -> Result<Self> {
        if mech.n() != data.n() || mech.k() != data.k() {
            return Err(Error::Dimension("treatment mechanism was fit on different data".into()));
        }
        let history = RegimeHistory::new(data, regime)?;
        let (n, k) = (data.n(), data.k());
        let mut cumulative = Vec::with_capacity(k + 2);
        cumulative.push(vec![T::one(); n]);
        for t in 0..=k {
            let next: Vec<T> =
                (0..n).map(|i| cumulative[t][i] * mech.prob(t, i, history.assigned[t][i])).collect();
            cumulative.push(next);
        }
        let truncation = mech.truncation();
        let floor = truncation.max(T::epsilon() * T::epsilon());
        let inverse = cumulative
            .iter()
            .map(|c| c.iter().map(|&g| T::one() / g.max(floor)).collect())
            .collect();
        Ok(Self { history, cumulative, inverse, truncation })
    }

    pub fn label(&self) -> &str {
        &self.history.label
    }

    pub fn k(&self) -> usize {
        self.cumulative.len() - 2
    }

    pub fn n(&self) -> usize {
        self.cumulative[0].len()
    }

    pub fn truncation(&self) -> T {
        self.truncation
    }

    #[inline]
    pub fn follows(&self, t: usize, i: usize) -> bool {
        self.history.follow[t][i]
    }

    pub fn cumulative(&self, t: usize) -> &[T] {
        &self.cumulative[t]
    }

    /// `1 / max(g^d_{0:t-1}, truncation)` evaluated with the regime's
    /// treatments, for every subject.
    pub fn inverse(&self, t: usize) -> &[T] {
        &self.inverse[t]
    }

    /// `H_t(i)`: zero for non-followers.
    #[inline]
    pub fn h(&self, t: usize, i: usize) -> T {
        if self.history.follow[t][i] {
            self.inverse[t][i]
        } else {
            T::zero()
        }
    }

    pub fn clever_weights(&self, t: usize) -> Vec<T> {
        (0..self.n()).map(|i| self.h(t, i)).collect()
    }

    /// Share of followers at `t` whose cumulative probability was raised to
    /// the truncation level.
    pub fn truncated_fraction(&self, t: usize) -> f64 {
        let followers = self.history.followers(t);
        if followers == 0 {
            return 0.0;
        }
        let hit = (0..self.n()).filter(|&i| self.follows(t, i) && self.cumulative[t][i] < self.truncation).count();
        hit as f64 / followers as f64
    }

    /// Largest clever weight over all times and followers.
    pub fn max_weight(&self) -> T {
        (0..=self.k() + 1)
            .flat_map(|t| (0..self.n()).map(move |i| (t, i)))
            .fold(T::zero(), |m, (t, i)| m.max(self.h(t, i)))
    }
}

/// `H_t = I(A(0..t-1) = d) / max(g_{0:t-1}, truncation)` for every subject.
pub fn clever_weight<T: Scalar>(
    data: &LongitudinalDataset<T>,
    mech: &TreatmentMechanism<T>,
    regime: &Regime<T>,
    t: usize,
) -> Result<Vec<T>> {
    if t > data.k() + 1 {
        return Err(Error::TimeIndex { t, max: data.k() + 1 });
    }
    Ok(RegimeWeights::new(data, mech, regime)?.clever_weights(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longdata::{Column, DatasetParts};

    fn data(k: usize, treatments: Vec<Vec<u8>>) -> LongitudinalDataset<f64> {
        let n = treatments[0].len();
        LongitudinalDataset::from_parts(DatasetParts {
            baseline: vec![Column::new("W1", (0..n).map(|i| i as f64).collect())],
            covariates: (1..=k).map(|t| vec![Column::new(format!("L1_{t}"), vec![0.0; n])]).collect(),
            treatments,
            outcome: vec![0.0; n],
            outcome_range: None,
            event: None,
        })
        .unwrap()
    }

    #[test]
    fn randomized_intercept_only() {
        let d = data(0, vec![vec![0, 1, 1, 0, 1, 0]]);
        let spec = NuisanceSpec { g: vec!["1".parse().unwrap()], ..NuisanceSpec::default() };
        let g = fit_g(&d, &spec).unwrap();
        assert!(g.p1(0).iter().all(|p| (p - 0.5).abs() < 1e-10));
    }

    #[test]
    fn everyone_treated_is_degenerate() {
        let d = data(0, vec![vec![1, 1, 1]]);
        let g = fit_g(&d, &NuisanceSpec { g: vec!["W1".parse().unwrap()], ..NuisanceSpec::default() }).unwrap();
        assert!(g.nodes()[0].is_degenerate());
        assert_eq!(g.p1(0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn weights_from_known_probabilities() {
        let d = data(2, vec![vec![1, 1, 0], vec![1, 1, 0], vec![1, 0, 0]]);
        let g = TreatmentMechanism::from_probabilities(&d, vec![vec![0.5; 3]; 3], 0.0).unwrap();
        let always = Regime::constant(2, 1);
        let h3 = clever_weight(&d, &g, &always, 3).unwrap();
        assert_eq!(h3, vec![8.0, 0.0, 0.0]);
        assert_eq!(clever_weight(&d, &g, &always, 0).unwrap(), vec![1.0; 3]);
        assert!(clever_weight(&d, &g, &always, 4).is_err());
    }

    #[test]
    fn truncation_caps_weight() {
        let d = data(0, vec![vec![1, 0]]);
        let g = TreatmentMechanism::from_probabilities(&d, vec![vec![5e-4, 0.5]], 1e-3).unwrap();
        let h = clever_weight(&d, &g, &Regime::constant(0, 1), 1).unwrap();
        assert!((h[0] - 1000.0).abs() < 1e-9);
        assert_eq!(g.truncated_fraction(), vec![0.5]);
    }

    #[test]
    fn counting_process_forces_treated() {
        let d = data(1, vec![vec![1, 0, 0, 0], vec![1, 1, 0, 0]]);
        let spec = NuisanceSpec { g: vec!["1".parse().unwrap()], counting_process: true, ..NuisanceSpec::default() };
        let g = fit_g(&d, &spec).unwrap();
        assert_eq!(g.p1(1)[0], 1.0);
        assert!((g.p1(1)[1] - 1.0 / 3.0).abs() < 1e-9);
        let bad = data(1, vec![vec![1, 0], vec![0, 1]]);
        assert!(fit_g(&bad, &spec).is_err());
    }
}
