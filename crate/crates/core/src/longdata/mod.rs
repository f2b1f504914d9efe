//! Longitudinal observations `O = (L(0), A(0), L(1), ..., A(K), Y)`, treatment
//! regimes and outcome scaling.

mod csv_io;
mod regime;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use csv_io::{emit_csv, ingest_csv, read_csv, write_csv, ColumnRole, CsvSchema};
pub use regime::{regime_indicator, History, Regime, RegimeHistory, RegimeKind, RuleFn};

#[derive(Debug, Clone, PartialEq)]
pub struct Column<T> {
    pub name: String,
    pub values: Vec<T>,
}

impl<T> Column<T> {
    pub fn new(name: impl Into<String>, values: Vec<T>) -> Self {
        Self { name: name.into(), values }
    }
}

/// Location of a named variable inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnRef {
    Baseline(usize),
    /// Time-varying covariate `j` measured at time `t >= 1`.
    Covariate { t: usize, j: usize },
    Treatment(usize),
}

impl ColumnRef {
    /// Measurement time of the variable (baseline variables are at time 0).
    pub fn time(&self) -> usize {
        match *self {
            ColumnRef::Baseline(_) => 0,
            ColumnRef::Covariate { t, .. } => t,
            ColumnRef::Treatment(t) => t,
        }
    }
}

/// Raw pieces of a dataset, validated by [`LongitudinalDataset::from_parts`].
#[derive(Debug, Clone)]
pub struct DatasetParts<T> {
    pub baseline: Vec<Column<T>>,
    /// `covariates[t - 1]` holds the covariates measured at time `t = 1..=K`.
    pub covariates: Vec<Vec<Column<T>>>,
    /// `treatments[t]` for `t = 0..=K`.
    pub treatments: Vec<Vec<u8>>,
    pub outcome: Vec<T>,
    pub outcome_range: Option<OutcomeScale<T>>,
    /// Base name of a terminal-event covariate (`L3` for columns `L3_1`, `L3_2`, ...).
    pub event: Option<String>,
}

/// Immutable, validated longitudinal dataset.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset<T> {
    n: usize,
    k: usize,
    baseline: Vec<Column<T>>,
    covariates: Vec<Vec<Column<T>>>,
    treatments: Vec<Vec<u8>>,
    outcome: Vec<T>,
    outcome_range: Option<OutcomeScale<T>>,
    event: Option<String>,
    alive: Option<Vec<Vec<bool>>>,
    index: HashMap<String, ColumnRef>,
}

impl<T: Scalar> LongitudinalDataset<T> {
    pub fn from_parts(parts: DatasetParts<T>) -> Result<Self> {
        let DatasetParts { baseline, covariates, treatments, outcome, outcome_range, event } = parts;
        if treatments.is_empty() {
            return Err(Error::Validation("at least one treatment node A0 is required".into()));
        }
        let k = treatments.len() - 1;
        if covariates.len() != k {
            return Err(Error::Validation(format!(
                "expected covariate blocks for times 1..={k}, got {}",
                covariates.len()
            )));
        }
        let n = outcome.len();
        if n == 0 {
            return Err(Error::Validation("dataset has no subjects".into()));
        }
        let mut index = HashMap::new();
        let mut register = |name: &str, r: ColumnRef| -> Result<()> {
            if index.insert(name.to_string(), r).is_some() {
                return Err(Error::Validation(format!("duplicate column `{name}`")));
            }
            Ok(())
        };
        for (j, c) in baseline.iter().enumerate() {
            check_len(&c.name, c.values.len(), n)?;
            register(&c.name, ColumnRef::Baseline(j))?;
        }
        for (b, block) in covariates.iter().enumerate() {
            for (j, c) in block.iter().enumerate() {
                check_len(&c.name, c.values.len(), n)?;
                register(&c.name, ColumnRef::Covariate { t: b + 1, j })?;
            }
        }
        for (t, a) in treatments.iter().enumerate() {
            let name = format!("A{t}");
            check_len(&name, a.len(), n)?;
            if let Some(i) = a.iter().position(|&v| v > 1) {
                return Err(Error::Validation(format!(
                    "treatment not binary: {name} = {} for subject {i}",
                    a[i]
                )));
            }
            register(&name, ColumnRef::Treatment(t))?;
        }
        for (i, y) in outcome.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::Validation(format!("outcome of subject {i} is not finite")));
            }
            if let Some(r) = &outcome_range {
                if *y < r.lower || *y > r.upper {
                    return Err(Error::Range {
                        value: y.as_f64(),
                        lower: r.lower.as_f64(),
                        upper: r.upper.as_f64(),
                    });
                }
            }
        }
        let mut data = Self {
            n,
            k,
            baseline,
            covariates,
            treatments,
            outcome,
            outcome_range,
            event: None,
            alive: None,
            index,
        };
        if let Some(ev) = event {
            data.alive = Some(data.derive_alive(&ev)?);
            data.event = Some(ev);
        }
        Ok(data)
    }

    /// Alive mask from an absorbing 0/1 event covariate. After the event the
    /// outcome must equal 1.
    fn derive_alive(&self, event: &str) -> Result<Vec<Vec<bool>>> {
        let mut alive = vec![vec![true; self.n]; self.k + 1];
        let mut dead = vec![false; self.n];
        for t in 0..=self.k {
            let name = format!("{event}_{t}");
            let col = match self.lookup(&name) {
                Some(r) => Some(r),
                None if t == 0 => None,
                None => return Err(Error::Validation(format!("event column `{name}` missing"))),
            };
            for i in 0..self.n {
                if let Some(r) = col {
                    let v = self.value(r, i);
                    if v != T::zero() && v != T::one() {
                        return Err(Error::Validation(format!(
                            "event column `{name}` is not binary for subject {i}"
                        )));
                    }
                    let event_now = v == T::one();
                    if dead[i] && !event_now {
                        return Err(Error::Validation(format!(
                            "event `{event}` is not absorbing for subject {i} at time {t}"
                        )));
                    }
                    dead[i] = event_now;
                }
                alive[t][i] = !dead[i];
            }
        }
        for i in 0..self.n {
            if dead[i] && self.outcome[i] != T::one() {
                return Err(Error::Validation(format!(
                    "subject {i} had event `{event}` but outcome is not 1"
                )));
            }
        }
        Ok(alive)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Index of the last treatment node; the outcome is measured at `K + 1`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn baseline(&self) -> &[Column<T>] {
        &self.baseline
    }

    /// Covariates measured at time `t` (`1..=K`).
    pub fn covariates_at(&self, t: usize) -> &[Column<T>] {
        &self.covariates[t - 1]
    }

    pub fn treatment(&self, t: usize) -> &[u8] {
        &self.treatments[t]
    }

    pub fn outcome(&self) -> &[T] {
        &self.outcome
    }

    pub fn outcome_range(&self) -> Option<&OutcomeScale<T>> {
        self.outcome_range.as_ref()
    }

    pub fn event(&self) -> Option<&str> {
        self.event.as_deref()
    }

    pub fn has_alive_mask(&self) -> bool {
        self.alive.is_some()
    }

    /// Whether subject `i` has not had the terminal event as of `L(t)`.
    #[inline]
    pub fn alive(&self, t: usize, i: usize) -> bool {
        match &self.alive {
            Some(a) => a[t][i],
            None => true,
        }
    }

    pub fn lookup(&self, name: &str) -> Option<ColumnRef> {
        self.index.get(name).copied()
    }

    #[inline]
    pub fn value(&self, r: ColumnRef, i: usize) -> T {
        match r {
            ColumnRef::Baseline(j) => self.baseline[j].values[i],
            ColumnRef::Covariate { t, j } => self.covariates[t - 1][j].values[i],
            ColumnRef::Treatment(t) => T::from_u8(self.treatments[t][i]).unwrap_or_else(T::zero),
        }
    }

    /// Column names in temporal order: `L(0)`, `A0`, `L(1)`, `A1`, ..., `Y`.
    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.baseline.iter().map(|c| c.name.clone()).collect();
        for t in 0..=self.k {
            if t > 0 {
                names.extend(self.covariates[t - 1].iter().map(|c| c.name.clone()));
            }
            names.push(format!("A{t}"));
        }
        names.push("Y".into());
        names
    }

    /// Same dataset with outcomes replaced through `f`. Declared bounds and
    /// event bookkeeping are dropped.
    pub fn map_outcome(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let parts = DatasetParts {
            baseline: self.baseline.clone(),
            covariates: self.covariates.clone(),
            treatments: self.treatments.clone(),
            outcome: self.outcome.iter().map(|&y| f(y)).collect(),
            outcome_range: None,
            event: None,
        };
        Self::from_parts(parts)
    }

    /// Subset (with repetition) of subjects, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let pick = |v: &[T]| rows.iter().map(|&i| v[i]).collect::<Vec<T>>();
        let parts = DatasetParts {
            baseline: self.baseline.iter().map(|c| Column::new(c.name.clone(), pick(&c.values))).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|b| b.iter().map(|c| Column::new(c.name.clone(), pick(&c.values))).collect())
                .collect(),
            treatments: self.treatments.iter().map(|a| rows.iter().map(|&i| a[i]).collect()).collect(),
            outcome: pick(&self.outcome),
            outcome_range: self.outcome_range.clone(),
            event: self.event.clone(),
        };
        Self::from_parts(parts)
    }

    /// Converts every numeric field to another scalar type.
    pub fn cast<U: Scalar>(&self) -> LongitudinalDataset<U> {
        let conv = |c: &Column<T>| Column::new(c.name.clone(), c.values.iter().map(|v| U::lit(v.as_f64())).collect());
        LongitudinalDataset {
            n: self.n,
            k: self.k,
            baseline: self.baseline.iter().map(conv).collect(),
            covariates: self.covariates.iter().map(|b| b.iter().map(conv).collect()).collect(),
            treatments: self.treatments.clone(),
            outcome: self.outcome.iter().map(|v| U::lit(v.as_f64())).collect(),
            outcome_range: self
                .outcome_range
                .as_ref()
                .map(|r| OutcomeScale { lower: U::lit(r.lower.as_f64()), upper: U::lit(r.upper.as_f64()) }),
            event: self.event.clone(),
            alive: self.alive.clone(),
            index: self.index.clone(),
        }
    }
}

fn check_len(name: &str, len: usize, n: usize) -> Result<()> {
    if len != n {
        return Err(Error::Dimension(format!("column `{name}` has {len} values, expected {n}")));
    }
    Ok(())
}

/// Known range `(a, b)` of an outcome, used to map it onto the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OutcomeScale<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> OutcomeScale<T> {
    pub fn new(lower: T, upper: T) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::Validation(format!("invalid outcome bounds ({lower}, {upper})")));
        }
        Ok(Self { lower, upper })
    }

    /// Empirical min/max widened by `1e-3 * (max - min)` on each side so no
    /// value sits on the logistic boundary.
    pub fn from_values(values: &[T]) -> Result<Self> {
        Self::from_values_filtered(values.iter().copied())
    }

    pub(crate) fn from_values_filtered(values: impl Iterator<Item = T>) -> Result<Self> {
        let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
        let mut any = false;
        for v in values {
            if !v.is_finite() {
                return Err(Error::Validation(format!("non-finite value {v} in outcome")));
            }
            lo = lo.min(v);
            hi = hi.max(v);
            any = true;
        }
        if !any {
            return Err(Error::Validation("cannot determine bounds of an empty outcome".into()));
        }
        let delta = if hi > lo { T::lit(1e-3) * (hi - lo) } else { T::lit(1e-3) * hi.abs().max(T::one()) };
        Self::new(lo - delta, hi + delta)
    }

    pub fn width(&self) -> T {
        self.upper - self.lower
    }

    #[inline]
    pub fn scale_value(&self, v: T) -> T {
        (v - self.lower) / (self.upper - self.lower)
    }

    #[inline]
    pub fn unscale_value(&self, u: T) -> T {
        self.lower + u * (self.upper - self.lower)
    }

    /// Maps `[a, b]` onto `[0, 1]`; values outside the range are rejected.
    pub fn scale(&self, values: &[T]) -> Result<Vec<T>> {
        values
            .iter()
            .map(|&v| {
                if v < self.lower || v > self.upper || !v.is_finite() {
                    Err(Error::Range { value: v.as_f64(), lower: self.lower.as_f64(), upper: self.upper.as_f64() })
                } else {
                    Ok(self.scale_value(v))
                }
            })
            .collect()
    }

    pub fn unscale(&self, values: &[T]) -> Vec<T> {
        values.iter().map(|&u| self.unscale_value(u)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_midpoint_scaling() {
        let unit = OutcomeScale::new(0.0, 1.0).unwrap();
        assert_eq!(unit.scale(&[0.3]).unwrap(), vec![0.3]);
        let wide = OutcomeScale::new(-2.0, 2.0).unwrap();
        assert_eq!(wide.scale(&[0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let s = OutcomeScale::new(0.0, 1.0).unwrap();
        assert!(matches!(s.scale(&[1.5]), Err(Error::Range { .. })));
        assert!(OutcomeScale::new(1.0, 1.0).is_err());
    }

    #[test]
    fn empirical_bounds_are_widened() {
        let s = OutcomeScale::<f64>::from_values(&[0.0, 1.0, 0.5]).unwrap();
        assert!((s.lower + 1e-3).abs() < 1e-15);
        assert!((s.upper - 1.001).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn scale_round_trip(lo in -50.0f64..50.0, width in 0.01f64..100.0, us in prop::collection::vec(0.0f64..=1.0, 1..64)) {
            let s = OutcomeScale::new(lo, lo + width).unwrap();
            let values: Vec<f64> = us.iter().map(|u| lo + u * width).map(|v: f64| v.min(lo + width)).collect();
            let back = s.unscale(&s.scale(&values).unwrap());
            for (a, b) in values.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
