//! Bootstrap of the targeting step only: the treatment mechanism and the
//! initial outcome regressions stay frozen; each replicate reruns the
//! targeting updates on resampled subjects.

use log::warn;
use rand::Rng;
use rayon::prelude::*;

use super::{BootstrapSummary, VarianceMethod, VarianceReport};
use crate::error::{Error, Result};
use crate::nuisance::{target_sequential, RegimeWeights, SequentialQ, Submodel};
use crate::scalar::{sample_variance, Scalar};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy)]
pub struct BootstrapArm<'a, T> {
    pub weights: &'a RegimeWeights<T>,
    /// Untargeted (initial) fits.
    pub q_initial: &'a SequentialQ<T>,
    pub coef: T,
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub submodel: Submodel,
    /// Replicates dropped for lack of followers beyond this share flag the result.
    pub max_drop_fraction: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { replicates: 1000, seed: 0, submodel: Submodel::CleverCovariate, max_drop_fraction: 0.05 }
    }
}

/// Multinomial resampling counts of `n` draws with replacement.
fn resample_counts<T: Scalar>(n: usize, seed: u64, b: usize) -> Vec<T> {
    let mut rng = rng_for(seed, &[b as u64]);
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.gen_range(0..n)] += 1;
    }
    counts.into_iter().map(|c| T::from_u32(c).unwrap_or_else(T::zero)).collect()
}

fn replicate<T: Scalar>(arms: &[BootstrapArm<'_, T>], opts: &BootstrapOptions, b: usize) -> Result<Option<T>> {
    let n = arms[0].q_initial.n();
    let counts = resample_counts::<T>(n, opts.seed, b);
    let mut psi = T::zero();
    for arm in arms {
        match target_sequential(arm.q_initial, arm.weights, opts.submodel, Some(&counts)) {
            Ok(q) => psi += arm.coef * q.psi(Some(&counts)),
            Err(Error::UnsupportedRegime { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(psi))
}

/// Variance of `psi*_b` over `B` replicates (denominator `B - 1`).
/// Deterministic given the seed, at any thread count.
pub fn bootstrap_targeting_variance<T: Scalar>(
    arms: &[BootstrapArm<'_, T>],
    opts: &BootstrapOptions,
) -> Result<VarianceReport<T>> {
    if arms.is_empty() {
        return Err(Error::Estimation("no regimes given".into()));
    }
    if opts.replicates < 2 {
        return Err(Error::Config(format!("bootstrap needs B >= 2, got {}", opts.replicates)));
    }
    let n = arms[0].q_initial.n();
    if arms.iter().any(|a| a.q_initial.n() != n || a.weights.n() != n) {
        return Err(Error::Dimension("bootstrap arms come from different datasets".into()));
    }
    if arms.iter().any(|a| a.q_initial.is_targeted()) {
        return Err(Error::Estimation("bootstrap needs untargeted initial fits".into()));
    }
    let results: Vec<Option<T>> =
        (0..opts.replicates).into_par_iter().map(|b| replicate(arms, opts, b)).collect::<Result<_>>()?;
    let draws: Vec<T> = results.iter().flatten().copied().collect();
    let dropped = opts.replicates - draws.len();
    let flagged = dropped as f64 > opts.max_drop_fraction * opts.replicates as f64;
    if dropped > 0 {
        warn!("{dropped} of {} bootstrap replicates dropped (no followers at some node)", opts.replicates);
    }
    if draws.len() < 2 {
        return Err(Error::Estimation(format!("only {} bootstrap replicates could be targeted", draws.len())));
    }
    let mut report = VarianceReport::plain(VarianceMethod::Bootstrap, sample_variance(&draws), n);
    report.bootstrap = Some(BootstrapSummary { requested: opts.replicates, dropped, flagged, draws });
    report.degenerate = flagged;
    Ok(report)
}
