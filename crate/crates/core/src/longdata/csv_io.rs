//! CSV ingestion and emission.
//!
//! One row per subject. Columns follow the naming convention `W*` (baseline),
//! `A<t>` (treatment), `L<j>_<t>` (covariate `j` at time `t`; time 0 is
//! baseline) and `Y` (outcome), unless an explicit role map is given.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Column, DatasetParts, LongitudinalDataset, OutcomeScale};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Baseline,
    Treatment(usize),
    Covariate(usize),
    Outcome,
    Ignore,
}

#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    /// Explicit roles; columns not listed fall back to the naming convention.
    pub roles: BTreeMap<String, ColumnRole>,
    /// Base name of the absorbing event covariate, e.g. `L3`.
    pub event: Option<String>,
    /// Declared outcome range; values outside it are rejected.
    pub outcome_range: Option<(f64, f64)>,
}

impl CsvSchema {
    pub fn with_event(mut self, event: impl Into<String>) -> Self {
        self.event = Some(event.into());
        self
    }

    pub fn with_outcome_range(mut self, lower: f64, upper: f64) -> Self {
        self.outcome_range = Some((lower, upper));
        self
    }

    fn role_of(&self, name: &str) -> Option<ColumnRole> {
        if let Some(r) = self.roles.get(name) {
            return Some(*r);
        }
        infer_role(name)
    }
}

fn infer_role(name: &str) -> Option<ColumnRole> {
    if name == "Y" {
        return Some(ColumnRole::Outcome);
    }
    if name.starts_with('W') {
        return Some(ColumnRole::Baseline);
    }
    if let Some(rest) = name.strip_prefix('A') {
        if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
            return rest.parse().ok().map(ColumnRole::Treatment);
        }
    }
    if name.starts_with('L') {
        let (_, t) = name.rsplit_once('_')?;
        let t: usize = t.parse().ok()?;
        return Some(if t == 0 { ColumnRole::Baseline } else { ColumnRole::Covariate(t) });
    }
    None
}

pub fn ingest_csv<T: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LongitudinalDataset<T>> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<T: Scalar, R: Read>(reader: R, schema: &CsvSchema) -> Result<LongitudinalDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let mut roles = Vec::with_capacity(headers.len());
    for h in &headers {
        let role = schema
            .role_of(h)
            .ok_or_else(|| Error::Validation(format!("cannot infer the role of column `{h}`")))?;
        roles.push(role);
    }
    let k = roles
        .iter()
        .filter_map(|r| match r {
            ColumnRole::Treatment(t) => Some(*t),
            _ => None,
        })
        .max()
        .ok_or_else(|| Error::Validation("no treatment columns (A0, A1, ...)".into()))?;
    for t in 0..=k {
        if !roles.contains(&ColumnRole::Treatment(t)) {
            return Err(Error::Validation(format!("missing treatment column A{t}")));
        }
    }
    if roles.iter().filter(|r| **r == ColumnRole::Outcome).count() != 1 {
        return Err(Error::Validation("exactly one outcome column is required".into()));
    }
    if let Some((j, _)) = roles.iter().enumerate().find(|(_, r)| matches!(r, ColumnRole::Covariate(t) if *t > k)) {
        return Err(Error::Validation(format!("covariate `{}` is measured after the last treatment", headers[j])));
    }

    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    let mut treat: Vec<Vec<u8>> = vec![Vec::new(); k + 1];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if rec.len() != headers.len() {
            return Err(Error::Parse { row, message: format!("expected {} fields, got {}", headers.len(), rec.len()) });
        }
        for (j, field) in rec.iter().enumerate() {
            match roles[j] {
                ColumnRole::Ignore => {}
                ColumnRole::Treatment(t) => {
                    if field.is_empty() {
                        return Err(Error::Validation(format!("missing treatment value A{t} at row {row}")));
                    }
                    let v: f64 = field
                        .parse()
                        .map_err(|_| Error::Parse { row, message: format!("bad treatment value `{field}`") })?;
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Validation(format!("treatment not binary: A{t} = {field} at row {row}")));
                    }
                    treat[t].push(v as u8);
                }
                _ => {
                    let v: f64 = field.parse().map_err(|_| Error::Parse {
                        row,
                        message: format!("bad numeric value `{field}` in column `{}`", headers[j]),
                    })?;
                    numeric[j].push(v);
                }
            }
        }
    }

    let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
    let mut baseline = Vec::new();
    let mut covariates: Vec<Vec<Column<T>>> = vec![Vec::new(); k];
    let mut outcome = Vec::new();
    for (j, h) in headers.iter().enumerate() {
        match roles[j] {
            ColumnRole::Baseline => baseline.push(Column::new(h.clone(), conv(&numeric[j]))),
            ColumnRole::Covariate(t) => covariates[t - 1].push(Column::new(h.clone(), conv(&numeric[j]))),
            ColumnRole::Outcome => outcome = conv(&numeric[j]),
            _ => {}
        }
    }
    let outcome_range = match schema.outcome_range {
        Some((a, b)) => Some(OutcomeScale::new(T::lit(a), T::lit(b))?),
        None => None,
    };
    LongitudinalDataset::from_parts(DatasetParts {
        baseline,
        covariates,
        treatments: treat,
        outcome,
        outcome_range,
        event: schema.event.clone(),
    })
}

pub fn emit_csv<T: Scalar>(data: &LongitudinalDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(data, std::io::BufWriter::new(file))
}

/// Writes the dataset in temporal column order. Floats use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv<T: Scalar, W: Write>(data: &LongitudinalDataset<T>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(data.column_names())?;
    let mut row = Vec::new();
    for i in 0..data.n() {
        row.clear();
        row.extend(data.baseline().iter().map(|c| fmt(c.values[i])));
        for t in 0..=data.k() {
            if t > 0 {
                row.extend(data.covariates_at(t).iter().map(|c| fmt(c.values[i])));
            }
            row.push(data.treatment(t)[i].to_string());
        }
        row.push(fmt(data.outcome()[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt<T: Scalar>(v: T) -> String {
    format!("{:?}", v.as_f64())
}
