//! TMLE estimating equation, substitution bounds and the point-treatment
//! variance path, on simulated data.

use ltmle::estimators::{aipw_mean, modified_tmle_mean, tmle_mean};
use ltmle::longdata::Regime;
use ltmle::nuisance::{fit_g, fit_sequential_q, NuisanceSpec, RegimeWeights, Submodel, Targeting};
use ltmle::simgen::{generate, DgpConfig, Horizon};
use ltmle::variance::{point_treatment_variance, robust_variance_total, RobustArm, RobustMethod};

const SUBMODELS: [Submodel; 2] = [Submodel::WeightedIntercept, Submodel::CleverCovariate];

fn config(horizon: Horizon, i: u64) -> DgpConfig {
    let beta_p: f64 = [-2.0, -1.0, 0.0, 1.0][(i % 4) as usize];
    let beta_p = if horizon == Horizon::Longitudinal { beta_p.min(0.0) } else { beta_p };
    DgpConfig { horizon, beta_p, beta_psi: (i % 3) as f64 * 0.5, n: 500, seed: 7_000 + i }
}

#[test]
fn every_tmle_variant_solves_the_eif_equation() {
    for horizon in [Horizon::Point, Horizon::Longitudinal] {
        let spec = if horizon == Horizon::Point { NuisanceSpec::default() } else { NuisanceSpec::longitudinal() };
        for i in 0..50 {
            let data = generate(&config(horizon, i)).unwrap();
            let mech = fit_g(&data, &spec).unwrap();
            for a in [0u8, 1] {
                let w = RegimeWeights::new(&data, &mech, &Regime::constant(data.k(), a)).unwrap();
                let q0 = fit_sequential_q(&data, &w, &spec, Targeting::None).unwrap();
                for sub in SUBMODELS {
                    for r in [tmle_mean(&data, &w, &spec, sub).unwrap(), modified_tmle_mean(&w, &q0, sub).unwrap()] {
                        let m = r.eif.mean();
                        assert!(m.abs() < 1e-7, "{horizon:?} dataset {i} a={a} {:?} {sub:?}: mean D* = {m:e}", r.method);
                        assert!((0.0..=1.0).contains(&r.psi_hat), "substitution bound: {}", r.psi_hat);
                    }
                }
                // AIPW solves the same equation by construction.
                assert!(aipw_mean(&w, &q0).unwrap().eif.mean().abs() < 1e-9);
            }
        }
    }
}

#[test]
fn point_path_matches_general_robust_machinery() {
    let spec = NuisanceSpec::default();
    for i in 0..50 {
        let data = generate(&config(Horizon::Point, 100 + i)).unwrap();
        let mech = fit_g(&data, &spec).unwrap();
        let fits: Vec<_> = [1u8, 0]
            .iter()
            .map(|&a| {
                let w = RegimeWeights::new(&data, &mech, &Regime::constant(0, a)).unwrap();
                let r = tmle_mean(&data, &w, &spec, Submodel::WeightedIntercept).unwrap();
                (w, r)
            })
            .collect();
        for coefs in [[1.0, 0.0], [1.0, -1.0]] {
            let arms: Vec<RobustArm<'_, f64>> = fits
                .iter()
                .zip(coefs)
                .filter(|(_, c)| *c != 0.0)
                .map(|((w, r), c)| RobustArm { weights: w, q: &r.q[0], psi: r.psi_hat, coef: c })
                .collect();
            for method in [RobustMethod::Tmle, RobustMethod::Ipw, RobustMethod::PlugIn] {
                let general = robust_variance_total(&data, &arms, &spec, method).unwrap().variance_of_psi_hat;
                let direct = point_treatment_variance(&data, &arms, &spec, method).unwrap().variance_of_psi_hat;
                assert!(
                    (general - direct).abs() <= 1e-10 * direct.abs().max(1.0),
                    "dataset {i} {method:?}: {general} vs {direct}"
                );
            }
        }
    }
}
