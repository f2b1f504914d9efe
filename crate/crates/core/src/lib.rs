//! Longitudinal targeted maximum likelihood estimation with robust variance
//! estimation under positivity violations.

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod glm;
pub mod longdata;
pub mod msm;
pub mod nuisance;
pub mod scalar;
pub mod seed;
pub mod simgen;
pub mod variance;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset = longdata::LongitudinalDataset<f64>;
pub type Dataset32 = longdata::LongitudinalDataset<f32>;
pub type GlmFit = glm::GlmFit<f64>;
pub type GlmFit32 = glm::GlmFit<f32>;
pub type Estimate = estimators::EstimateResult<f64>;
pub type Estimate32 = estimators::EstimateResult<f32>;
pub type VarianceReport = variance::VarianceReport<f64>;
pub type VarianceReport32 = variance::VarianceReport<f32>;
