//! Nuisance parameters: treatment mechanism, clever weights and sequential
//! outcome regressions.

mod formula;
pub(crate) mod sequential;
mod treatment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use formula::{CompiledFormula, Formula};
pub use sequential::{
    fit_sequential, fit_sequential_q, target_sequential, SequentialQ, Submodel, Targeting, TargetingStep,
};
pub use treatment::{clever_weight, fit_g, NodeModel, RegimeWeights, TreatmentMechanism};

/// Main terms in the baseline and current covariates plus their interaction.
pub const DEFAULT_FORMULA: &str = "W1,W2,L1_{t},L2_{t},L1_{t}*L2_{t}";

/// Model specification for the nuisance fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceSpec {
    /// Treatment-model formulas: a single entry applies to every node,
    /// otherwise one per node `0..=K`.
    pub g: Vec<Formula>,
    /// Outcome-regression formulas: a single entry applies to every level,
    /// otherwise one per level `1..=K+1`.
    pub q: Vec<Formula>,
    /// Lower bound for cumulative treatment probabilities; 0 disables.
    pub truncation: f64,
    /// Treatment stays on once started.
    pub counting_process: bool,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        let f = Formula::parse(DEFAULT_FORMULA).expect("default formula parses");
        Self { g: vec![f.clone()], q: vec![f], truncation: 0.0, counting_process: false }
    }
}

impl NuisanceSpec {
    /// Defaults for the longitudinal simulation: truncation at 0.001 and
    /// counting-process treatment.
    pub fn longitudinal() -> Self {
        Self { truncation: 1e-3, counting_process: true, ..Self::default() }
    }

    pub fn with_formulas(mut self, g: &str, q: &str) -> Result<Self> {
        self.g = vec![g.parse()?];
        self.q = vec![q.parse()?];
        Ok(self)
    }

    pub fn g_formula(&self, node: usize) -> Result<&Formula> {
        pick(&self.g, node, "treatment")
    }

    /// Formula for the outcome regression at `level >= 1`.
    pub fn q_formula(&self, level: usize) -> Result<&Formula> {
        pick(&self.q, level - 1, "outcome")
    }
}

fn pick<'a>(list: &'a [Formula], idx: usize, what: &str) -> Result<&'a Formula> {
    match list.len() {
        0 => Err(Error::Config(format!("no {what} formula given"))),
        1 => Ok(&list[0]),
        _ => list
            .get(idx)
            .ok_or_else(|| Error::Config(format!("no {what} formula for time {idx} ({} given)", list.len()))),
    }
}
