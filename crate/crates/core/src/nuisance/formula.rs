//! Design formulas: comma-separated terms over column names, `*` for
//! interactions, intercept always included.
//!
//! Names may use `{t}` or `{t-k}` to refer to the latest history time of the
//! regression they are compiled for (node `t` for a treatment model, `t - 1`
//! for the outcome regression at level `t`), so one formula serves every time
//! point.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::Design;
use crate::longdata::{ColumnRef, LongitudinalDataset};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Formula {
    source: String,
    terms: Vec<Vec<String>>,
}

impl Formula {
    pub fn parse(source: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in source.split(',') {
            let raw = raw.trim();
            if raw.is_empty() || raw == "1" {
                continue;
            }
            let factors: Vec<String> = raw.split('*').map(|f| f.trim().to_string()).collect();
            if let Some(bad) = factors.iter().find(|f| !valid_name(f)) {
                return Err(Error::Formula(format!("invalid variable `{bad}` in term `{raw}`")));
            }
            terms.push(factors);
        }
        Ok(Self { source: source.trim().to_string(), terms })
    }

    /// Intercept-only formula.
    pub fn intercept() -> Self {
        Self { source: "1".into(), terms: Vec::new() }
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// Terms with time placeholders replaced by concrete times.
    pub fn resolve(&self, history_time: usize) -> Result<Vec<Vec<String>>> {
        self.terms
            .iter()
            .map(|term| term.iter().map(|f| substitute(f, history_time)).collect())
            .collect()
    }

    /// Binds the formula to dataset columns for a regression whose covariates
    /// are measured up to `history_time`. Treatment columns are allowed up to
    /// `max_treatment` (exclusive bound `None` disallows them).
    pub fn compile<T: Scalar>(
        &self,
        data: &LongitudinalDataset<T>,
        history_time: usize,
        max_treatment: Option<usize>,
    ) -> Result<CompiledFormula> {
        let mut terms = Vec::with_capacity(self.terms.len());
        let mut names = Vec::with_capacity(self.terms.len());
        for term in self.resolve(history_time)? {
            let mut refs = Vec::with_capacity(term.len());
            for name in &term {
                let r = data
                    .lookup(name)
                    .ok_or_else(|| Error::Formula(format!("unknown column `{name}` in `{}`", self.source)))?;
                let ok = match r {
                    ColumnRef::Treatment(s) => max_treatment.is_some_and(|m| s <= m),
                    other => other.time() <= history_time,
                };
                if !ok {
                    return Err(Error::Formula(format!(
                        "column `{name}` is not part of the history at time {history_time}"
                    )));
                }
                refs.push(r);
            }
            names.push(term.join("*"));
            terms.push(refs);
        }
        Ok(CompiledFormula { terms, names })
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl TryFrom<String> for Formula {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<Formula> for String {
    fn from(f: Formula) -> String {
        f.source
    }
}

impl std::str::FromStr for Formula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '{' | '}' | '-' | '+'))
}

fn substitute(name: &str, history_time: usize) -> Result<String> {
    let Some(open) = name.find('{') else {
        return Ok(name.to_string());
    };
    let close = name[open..]
        .find('}')
        .map(|c| c + open)
        .ok_or_else(|| Error::Formula(format!("unclosed placeholder in `{name}`")))?;
    let inner: String = name[open + 1..close].chars().filter(|c| !c.is_whitespace()).collect();
    let offset: i64 = match inner.as_str() {
        "t" => 0,
        s if s.starts_with("t-") => -s[2..]
            .parse::<i64>()
            .map_err(|_| Error::Formula(format!("bad placeholder `{{{inner}}}`")))?,
        _ => return Err(Error::Formula(format!("bad placeholder `{{{inner}}}`"))),
    };
    let time = history_time as i64 + offset;
    if time < 0 {
        return Err(Error::Formula(format!("`{name}` refers to a negative time at history time {history_time}")));
    }
    let rest = substitute(&name[close + 1..], history_time)?;
    Ok(format!("{}{time}{rest}", &name[..open]))
}

/// A formula bound to concrete dataset columns.
#[derive(Debug, Clone)]
pub struct CompiledFormula {
    terms: Vec<Vec<ColumnRef>>,
    names: Vec<String>,
}

impl CompiledFormula {
    /// Column labels: `(Intercept)` followed by one per term.
    pub fn column_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string()).chain(self.names.iter().cloned()).collect()
    }

    pub fn width(&self) -> usize {
        self.terms.len() + 1
    }

    /// Design matrix over all subjects. `treatment` supplies the value used
    /// for treatment columns (observed or regime-assigned).
    pub fn design<T: Scalar>(
        &self,
        data: &LongitudinalDataset<T>,
        treatment: impl Fn(usize, usize) -> u8,
    ) -> Design<T> {
        let n = data.n();
        let p = self.width();
        let mut values = Vec::with_capacity(n * p);
        for i in 0..n {
            values.push(T::one());
            for term in &self.terms {
                let v = term.iter().fold(T::one(), |acc, &r| {
                    acc * match r {
                        ColumnRef::Treatment(t) => T::from_u8(treatment(t, i)).unwrap_or_else(T::zero),
                        other => data.value(other, i),
                    }
                });
                values.push(v);
            }
        }
        Design::new(n, p, values).expect("design dimensions are consistent")
    }
}
