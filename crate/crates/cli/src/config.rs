//! TOML configuration. Sections mirror the library configs; every field is
//! optional so command-line flags can fill or override it.

use std::path::Path;

use ltmle::experiment::MethodPair;
use ltmle::msm::MsmConfig;
use ltmle::nuisance::{Formula, NuisanceSpec, Submodel};
use ltmle::simgen::Horizon;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub dgp: DgpSection,
    #[serde(default)]
    pub nuisance: NuisanceSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub grid: GridSection,
    /// Working marginal structural model; adds an MSM variance block to reports.
    #[serde(default)]
    pub msm: Option<MsmConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSection {
    pub horizon: Option<Horizon>,
    pub beta_p: Option<f64>,
    pub beta_psi: Option<f64>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    /// Counterfactual draws for `truth`.
    pub truth_draws: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSection {
    /// Treatment formula (one for every node) or one per node.
    pub g: Option<Vec<Formula>>,
    /// Outcome-regression formula (one for every level) or one per level.
    pub q: Option<Vec<Formula>>,
    pub truncation: Option<f64>,
    pub counting_process: Option<bool>,
}

impl NuisanceSection {
    /// Resolves against design defaults (longitudinal data get truncation
    /// 0.001 and counting-process treatment).
    pub fn resolve(&self, k: usize) -> NuisanceSpec {
        let base = if k == 0 { NuisanceSpec::default() } else { NuisanceSpec::longitudinal() };
        NuisanceSpec {
            g: self.g.clone().unwrap_or(base.g),
            q: self.q.clone().unwrap_or(base.q),
            truncation: self.truncation.unwrap_or(base.truncation),
            counting_process: self.counting_process.unwrap_or(base.counting_process),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub estimators: Option<Vec<String>>,
    pub variance: Option<Vec<String>>,
    /// Static regimes as treatment strings, e.g. `"111"`.
    pub regimes: Option<Vec<String>>,
    pub coefs: Option<Vec<f64>>,
    pub bootstrap_draws: Option<usize>,
    pub seed: Option<u64>,
    pub level: Option<f64>,
    pub tmle_submodel: Option<Submodel>,
    pub mtmle_submodel: Option<Submodel>,
    /// Absorbing event covariate base name (e.g. `L3`).
    pub event: Option<String>,
    pub outcome_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: Option<Horizon>,
    pub beta_p: Option<Vec<f64>>,
    pub beta_psi: Option<Vec<f64>>,
    pub replicates: Option<usize>,
    pub n: Option<usize>,
    pub bootstrap_draws: Option<usize>,
    pub methods: Option<Vec<MethodPair>>,
    pub master_seed: Option<u64>,
    pub level: Option<f64>,
    pub alpha: Option<f64>,
    pub truth_draws: Option<usize>,
    pub tmle_submodel: Option<Submodel>,
    pub mtmle_submodel: Option<Submodel>,
}
