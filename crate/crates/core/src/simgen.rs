//! The two simulation designs (point treatment and a three-time-point
//! longitudinal study with an absorbing event), counterfactual truths and
//! frozen truth fixtures.
//!
//! In the longitudinal design the covariate update for `L1(t)` is read with
//! the lagged terms in the mean and standard deviation 0.5.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longdata::{Column, DatasetParts, LongitudinalDataset};
use crate::scalar::expit;
use crate::seed::rng_for;

/// Subjects per random substream.
const BLOCK: usize = 1024;

/// Event covariate of the longitudinal design.
pub const EVENT: &str = "L3";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Point,
    /// Treatment at times 0, 1, 2; outcome at time 3.
    Longitudinal,
}

impl Horizon {
    pub fn k(self) -> usize {
        match self {
            Horizon::Point => 0,
            Horizon::Longitudinal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Horizon::Point => "point",
            Horizon::Longitudinal => "longitudinal",
        }
    }
}

impl std::str::FromStr for Horizon {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Horizon::Point),
            "longitudinal" | "long" => Ok(Horizon::Longitudinal),
            other => Err(Error::Config(format!("unknown design `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub horizon: Horizon,
    /// Positivity parameter: larger values give more extreme treatment probabilities.
    pub beta_p: f64,
    /// Treatment effect parameter; 0 means no effect.
    pub beta_psi: f64,
    pub n: usize,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !self.beta_p.is_finite() || !self.beta_psi.is_finite() {
            return Err(Error::Config("beta_p and beta_psi must be finite".into()));
        }
        let hi = match self.horizon {
            Horizon::Point => 1.0,
            Horizon::Longitudinal => 0.0,
        };
        if !(-2.0..=hi).contains(&self.beta_p) {
            log::warn!("beta_p = {} is outside the studied range [-2, {hi}]", self.beta_p);
        }
        Ok(())
    }
}

/// `P(A(t) = 1 | W, L1(t), L2(t))`.
#[inline]
fn g_bar(beta_p: f64, w1: f64, w2: f64, l1: f64, l2: f64) -> f64 {
    expit(beta_p - (beta_p + 2.5) * w1 + 1.75 * w2 + (beta_p + 3.2) * l1 - 1.8 * l2 + 0.8 * l1 * l2)
}

/// Event / outcome probability given the previous covariates and treatment.
#[inline]
fn q_bar(beta_psi: f64, w1: f64, w2: f64, l1: f64, l2: f64, a: f64) -> f64 {
    expit(-0.5 + 1.2 * w1 - 2.4 * w2 - 1.8 * l1 - 1.6 * l2 + l1 * l2 - beta_psi * a)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if (-2.0..=2.0).contains(&z) {
            return z;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Baseline {
    w1: f64,
    w2: f64,
    w3: f64,
    l1: f64,
    l2: f64,
}

fn draw_baseline(rng: &mut ChaCha8Rng) -> Baseline {
    let w1 = truncated_normal(rng);
    let w2 = f64::from(rng.gen::<f64>() < expit(-1.0));
    let w3 = truncated_normal(rng);
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    Baseline { w1, w2, w3, l1: 0.1 + 0.4 * w1 + 0.5 * z1, l2: -0.55 + 0.5 * w1 + 0.75 * w2 + 0.5 * z2 }
}

/// Randomness consumed by one follow-up time, drawn whether or not it is used.
#[derive(Debug, Clone, Copy)]
struct StepDraws {
    u_event: f64,
    z1: f64,
    z2: f64,
    u_treat: f64,
}

fn draw_step(rng: &mut ChaCha8Rng) -> StepDraws {
    StepDraws { u_event: rng.gen(), z1: rng.sample(StandardNormal), z2: rng.sample(StandardNormal), u_treat: rng.gen() }
}

#[derive(Debug, Clone, Copy)]
struct State {
    l1: f64,
    l2: f64,
    dead: bool,
    a: u8,
}

/// Advances one time point. `treat` chooses `A(t)` for a subject at risk.
fn step(beta_psi: f64, b: &Baseline, prev: State, d: &StepDraws, treat: impl Fn(f64, f64, f64) -> u8) -> State {
    if prev.dead {
        return prev;
    }
    let ap = f64::from(prev.a);
    let dead = d.u_event < q_bar(beta_psi, b.w1, b.w2, prev.l1, prev.l2, ap);
    let l1 = 0.1 + 0.4 * b.w1 + 0.6 * prev.l1 - 0.7 * prev.l2 + 0.45 * beta_psi * ap + 0.5 * d.z1;
    let l2 = -0.55 + 0.5 * b.w1 + 0.75 * b.w2 + 0.1 * prev.l1 + 0.3 * prev.l2 + 0.75 * beta_psi * ap + 0.5 * d.z2;
    let a = if prev.a == 1 || dead { prev.a } else { treat(l1, l2, d.u_treat) };
    State { l1, l2, dead, a }
}

/// One simulated subject as a flat row in column order.
fn simulate_subject(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let b = draw_baseline(rng);
    let treat = |l1: f64, l2: f64, u: f64| u8::from(u < g_bar(cfg.beta_p, b.w1, b.w2, l1, l2));
    let a0 = treat(b.l1, b.l2, rng.gen());
    let mut row = vec![b.w1, b.w2, b.w3, b.l1, b.l2, f64::from(a0)];
    let mut state = State { l1: b.l1, l2: b.l2, dead: false, a: a0 };
    for _ in 0..cfg.horizon.k() {
        let d = draw_step(rng);
        state = step(cfg.beta_psi, &b, state, &d, treat);
        row.extend_from_slice(&[state.l1, state.l2, f64::from(u8::from(state.dead)), f64::from(state.a)]);
    }
    let u: f64 = rng.gen();
    let y = state.dead || u < q_bar(cfg.beta_psi, b.w1, b.w2, state.l1, state.l2, f64::from(state.a));
    row.push(f64::from(u8::from(y)));
    row
}

fn simulate_rows(cfg: &DgpConfig) -> Vec<Vec<f64>> {
    let blocks = cfg.n.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .flat_map_iter(|blk| {
            let mut rng = rng_for(cfg.seed, &[blk as u64]);
            let size = BLOCK.min(cfg.n - blk * BLOCK);
            (0..size).map(move |_| simulate_subject(cfg, &mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

fn assemble(cfg: &DgpConfig, rows: Vec<Vec<f64>>) -> Result<LongitudinalDataset<f64>> {
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let bin = |j: usize| rows.iter().map(|r| r[j] as u8).collect::<Vec<u8>>();
    let k = cfg.horizon.k();
    let mut treatments = vec![bin(5)];
    let mut covariates = Vec::with_capacity(k);
    for t in 1..=k {
        let base = 6 + 4 * (t - 1);
        covariates.push(vec![
            Column::new(format!("L1_{t}"), col(base)),
            Column::new(format!("L2_{t}"), col(base + 1)),
            Column::new(format!("{EVENT}_{t}"), col(base + 2)),
        ]);
        treatments.push(bin(base + 3));
    }
    LongitudinalDataset::from_parts(DatasetParts {
        baseline: vec![
            Column::new("W1", col(0)),
            Column::new("W2", col(1)),
            Column::new("W3", col(2)),
            Column::new("L1_0", col(3)),
            Column::new("L2_0", col(4)),
        ],
        covariates,
        treatments,
        outcome: col(6 + 4 * k),
        outcome_range: None,
        event: (k > 0).then(|| EVENT.to_string()),
    })
}

/// Point-treatment data: `W1, W2, W3, L1_0, L2_0, A0, Y`.
pub fn gen_point(cfg: &DgpConfig) -> Result<LongitudinalDataset<f64>> {
    if cfg.horizon != Horizon::Point {
        return Err(Error::Config("gen_point needs the point design".into()));
    }
    cfg.validate()?;
    assemble(cfg, simulate_rows(cfg))
}

/// Longitudinal data with counting-process treatment and an absorbing event
/// `L3`; after the event covariates and treatment are carried forward and
/// `Y = 1`.
pub fn gen_long(cfg: &DgpConfig) -> Result<LongitudinalDataset<f64>> {
    if cfg.horizon != Horizon::Longitudinal {
        return Err(Error::Config("gen_long needs the longitudinal design".into()));
    }
    cfg.validate()?;
    assemble(cfg, simulate_rows(cfg))
}

pub fn generate(cfg: &DgpConfig) -> Result<LongitudinalDataset<f64>> {
    match cfg.horizon {
        Horizon::Point => gen_point(cfg),
        Horizon::Longitudinal => gen_long(cfg),
    }
}

/// Counterfactual truth `E Y_1 - E Y_0` with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEstimate {
    pub horizon: Horizon,
    pub beta_psi: f64,
    pub psi: f64,
    pub mc_se: f64,
    pub mean_treated: f64,
    pub mean_control: f64,
    pub m: usize,
}

/// `P(Y_a = 1 | randomness)` under the static regime `a` at every node.
fn counterfactual_prob(horizon: Horizon, beta_psi: f64, b: &Baseline, steps: &[StepDraws], a: u8) -> f64 {
    let mut state = State { l1: b.l1, l2: b.l2, dead: false, a };
    for d in steps.iter().take(horizon.k()) {
        state = step(beta_psi, b, state, d, |_, _, _| a);
    }
    if state.dead {
        1.0
    } else {
        q_bar(beta_psi, b.w1, b.w2, state.l1, state.l2, f64::from(a))
    }
}

/// Simulates `m` subjects under both static regimes with common random
/// numbers; the final outcome enters through its conditional probability.
/// The truth does not depend on `beta_p`.
pub fn true_psi(horizon: Horizon, beta_psi: f64, m: usize, seed: u64) -> Result<TruthEstimate> {
    if m < 2 {
        return Err(Error::Config("true_psi needs m >= 2".into()));
    }
    let blocks = m.div_ceil(BLOCK);
    let sums: Vec<(f64, f64, f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut rng = rng_for(seed, &[blk as u64]);
            let size = BLOCK.min(m - blk * BLOCK);
            let mut acc = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..size {
                let b = draw_baseline(&mut rng);
                let _a0: f64 = rng.gen();
                let steps: Vec<StepDraws> = (0..horizon.k()).map(|_| draw_step(&mut rng)).collect();
                let p1 = counterfactual_prob(horizon, beta_psi, &b, &steps, 1);
                let p0 = counterfactual_prob(horizon, beta_psi, &b, &steps, 0);
                let d = p1 - p0;
                acc.0 += p1;
                acc.1 += p0;
                acc.2 += d;
                acc.3 += d * d;
            }
            acc
        })
        .collect();
    let (s1, s0, sd, sdd) = sums.iter().fold((0.0, 0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3));
    let mf = m as f64;
    let psi = sd / mf;
    let var = ((sdd - mf * psi * psi) / (mf - 1.0)).max(0.0);
    Ok(TruthEstimate {
        horizon,
        beta_psi,
        psi,
        mc_se: (var / mf).sqrt(),
        mean_treated: s1 / mf,
        mean_control: s0 / mf,
        m,
    })
}

const FROZEN: &str = include_str!("../fixtures/truth.csv");

/// Truths computed once with `m = 10^7` and stored with the crate.
pub fn frozen_truths() -> Vec<TruthEstimate> {
    let mut reader = csv::Reader::from_reader(FROZEN.as_bytes());
    reader.deserialize().collect::<std::result::Result<Vec<_>, _>>().expect("truth fixture is well formed")
}

/// Frozen truth for a design and effect size, if tabulated.
pub fn frozen_truth(horizon: Horizon, beta_psi: f64) -> Option<TruthEstimate> {
    frozen_truths().into_iter().find(|t| t.horizon == horizon && (t.beta_psi - beta_psi).abs() < 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(horizon: Horizon, n: usize) -> DgpConfig {
        DgpConfig { horizon, beta_p: -1.0, beta_psi: 1.0, n, seed: 11 }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = gen_long(&cfg(Horizon::Longitudinal, 2500)).unwrap();
        let b = gen_long(&cfg(Horizon::Longitudinal, 2500)).unwrap();
        assert_eq!(a.outcome(), b.outcome());
        assert_eq!(a.treatment(2), b.treatment(2));
    }

    #[test]
    fn column_layout() {
        let p = gen_point(&cfg(Horizon::Point, 5)).unwrap();
        assert_eq!(p.column_names(), ["W1", "W2", "W3", "L1_0", "L2_0", "A0", "Y"]);
        let l = gen_long(&cfg(Horizon::Longitudinal, 5)).unwrap();
        assert_eq!(
            l.column_names(),
            ["W1", "W2", "W3", "L1_0", "L2_0", "A0", "L1_1", "L2_1", "L3_1", "A1", "L1_2", "L2_2", "L3_2", "A2", "Y"]
        );
        assert!(l.has_alive_mask());
    }

    #[test]
    fn counting_process_and_absorbing_event() {
        let d = gen_long(&cfg(Horizon::Longitudinal, 4000)).unwrap();
        for i in 0..d.n() {
            for t in 1..=2 {
                assert!(d.treatment(t - 1)[i] <= d.treatment(t)[i]);
            }
            if !d.alive(1, i) {
                assert!(!d.alive(2, i));
                assert_eq!(d.outcome()[i], 1.0);
            }
        }
        let w1 = &d.baseline()[0].values;
        assert!(w1.iter().all(|w| (-2.0..=2.0).contains(w)));
    }

    #[test]
    fn null_effect_is_exactly_zero() {
        for h in [Horizon::Point, Horizon::Longitudinal] {
            let t = true_psi(h, 0.0, 10_000, 3).unwrap();
            assert_eq!(t.psi, 0.0);
        }
    }
}
