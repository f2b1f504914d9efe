use std::fmt;
use std::sync::Arc;

use super::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Read-only view of one subject's covariate history up to a node.
pub struct History<'a, T> {
    data: &'a LongitudinalDataset<T>,
    subject: usize,
    time: usize,
}

impl<'a, T: Scalar> History<'a, T> {
    pub fn new(data: &'a LongitudinalDataset<T>, subject: usize, time: usize) -> Self {
        Self { data, subject, time }
    }

    pub fn subject(&self) -> usize {
        self.subject
    }

    pub fn time(&self) -> usize {
        self.time
    }

    /// Covariate value by column name; `None` for unknown columns, treatment
    /// columns, and anything measured after the current node.
    pub fn get(&self, name: &str) -> Option<T> {
        let r = self.data.lookup(name)?;
        if matches!(r, super::ColumnRef::Treatment(_)) || r.time() > self.time {
            return None;
        }
        Some(self.data.value(r, self.subject))
    }
}

pub type RuleFn<T> = dyn Fn(&History<'_, T>) -> u8 + Send + Sync;

#[derive(Clone)]
pub enum RegimeKind<T> {
    /// Fixed treatment vector `a(0), ..., a(K)`.
    Static(Vec<u8>),
    /// Deterministic rule of the covariate history.
    Dynamic(Arc<RuleFn<T>>),
}

/// A treatment rule `d` assigning a treatment at every node.
#[derive(Clone)]
pub struct Regime<T> {
    pub kind: RegimeKind<T>,
    pub label: String,
}

impl<T> fmt::Debug for Regime<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RegimeKind::Static(a) => write!(f, "Regime({}: static {:?})", self.label, a),
            RegimeKind::Dynamic(_) => write!(f, "Regime({}: dynamic)", self.label),
        }
    }
}

impl<T: Scalar> Regime<T> {
    pub fn fixed(label: impl Into<String>, treatments: Vec<u8>) -> Self {
        Self { kind: RegimeKind::Static(treatments), label: label.into() }
    }

    /// Static regime assigning `a` at each of the `k + 1` nodes.
    pub fn constant(k: usize, a: u8) -> Self {
        let label = if a == 1 { "always" } else { "never" };
        Self::fixed(label, vec![a; k + 1])
    }

    pub fn dynamic(label: impl Into<String>, rule: impl Fn(&History<'_, T>) -> u8 + Send + Sync + 'static) -> Self {
        Self { kind: RegimeKind::Dynamic(Arc::new(rule)), label: label.into() }
    }

    pub fn is_static(&self) -> bool {
        matches!(self.kind, RegimeKind::Static(_))
    }

    pub fn validate(&self, data: &LongitudinalDataset<T>) -> Result<()> {
        if let RegimeKind::Static(a) = &self.kind {
            if a.len() != data.k() + 1 {
                return Err(Error::Validation(format!(
                    "static regime `{}` has {} nodes, dataset has {}",
                    self.label,
                    a.len(),
                    data.k() + 1
                )));
            }
            if a.iter().any(|&v| v > 1) {
                return Err(Error::Validation(format!("static regime `{}` is not binary", self.label)));
            }
        }
        Ok(())
    }

    /// Treatment assigned by the rule to subject `i` at node `t`.
    pub fn assign(&self, data: &LongitudinalDataset<T>, i: usize, t: usize) -> u8 {
        match &self.kind {
            RegimeKind::Static(a) => a[t],
            RegimeKind::Dynamic(rule) => rule(&History::new(data, i, t)).min(1),
        }
    }
}

/// Regime assignments and follower indicators evaluated once per dataset.
#[derive(Debug, Clone)]
pub struct RegimeHistory {
    pub label: String,
    /// `assigned[t][i]`, `t = 0..=K`.
    pub assigned: Vec<Vec<u8>>,
    /// `follow[t][i] = I(A(0..t-1) = d)`, `t = 0..=K+1`; `follow[0]` is all true.
    pub follow: Vec<Vec<bool>>,
}

impl RegimeHistory {
    pub fn new<T: Scalar>(data: &LongitudinalDataset<T>, regime: &Regime<T>) -> Result<Self> {
        regime.validate(data)?;
        let (n, k) = (data.n(), data.k());
        let assigned: Vec<Vec<u8>> =
            (0..=k).map(|t| (0..n).map(|i| regime.assign(data, i, t)).collect()).collect();
        let mut follow = Vec::with_capacity(k + 2);
        follow.push(vec![true; n]);
        for t in 1..=k + 1 {
            let prev: &Vec<bool> = &follow[t - 1];
            let a = data.treatment(t - 1);
            let next = (0..n).map(|i| prev[i] && a[i] == assigned[t - 1][i]).collect();
            follow.push(next);
        }
        Ok(Self { label: regime.label.clone(), assigned, follow })
    }

    pub fn k(&self) -> usize {
        self.assigned.len() - 1
    }

    pub fn followers(&self, t: usize) -> usize {
        self.follow[t].iter().filter(|&&f| f).count()
    }
}

/// `I(A(0..t-1) = d(L(0..t-1)))` per subject; identically 1 at `t = 0`.
pub fn regime_indicator<T: Scalar>(data: &LongitudinalDataset<T>, regime: &Regime<T>, t: usize) -> Result<Vec<u8>> {
    if t > data.k() + 1 {
        return Err(Error::TimeIndex { t, max: data.k() + 1 });
    }
    let rh = RegimeHistory::new(data, regime)?;
    Ok(rh.follow[t].iter().map(|&f| f as u8).collect())
}
