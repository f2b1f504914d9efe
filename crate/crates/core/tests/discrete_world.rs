mod common;

use common::discrete::{Path, World};
use ltmle::estimators::{aipw_mean, contrast, tmle_mean};
use ltmle::longdata::{LongitudinalDataset, Regime};
use ltmle::msm::{
    msm_intercept_identity_check, msm_variance_total, sigma2_last_static, sigma_t_cross_covariance, MsmArm, MsmSpec,
};
use ltmle::nuisance::{fit_sequential_q, NuisanceSpec, RegimeWeights, SequentialQ, Submodel, Targeting, TreatmentMechanism};
use ltmle::variance::{empirical_eif_variance, robust_variance_total, RobustArm, RobustMethod};

struct Fixture {
    world: World,
    data: LongitudinalDataset<f64>,
    rows: Vec<Path>,
    mech: TreatmentMechanism<f64>,
    spec: NuisanceSpec,
}

fn fixture(k: usize) -> Fixture {
    let world = World { k };
    let (data, rows) = world.dataset();
    let mech = world.mechanism(&data, &rows);
    Fixture { world, data, rows, mech, spec: world.saturated_spec() }
}

struct Fitted {
    d: Vec<u8>,
    weights: RegimeWeights<f64>,
    q: SequentialQ<f64>,
    psi: f64,
}

fn fit(f: &Fixture, label: &str, d: Vec<u8>) -> Fitted {
    let weights = RegimeWeights::new(&f.data, &f.mech, &Regime::fixed(label, d.clone())).unwrap();
    let r = tmle_mean(&f.data, &weights, &f.spec, Submodel::WeightedIntercept).unwrap();
    Fitted { d, weights, q: r.q[0].clone(), psi: r.psi_hat }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn multiplicities_realise_the_world() {
    for k in [0, 2] {
        let w = World { k };
        let total: u64 = w.paths().iter().map(|(_, m)| m).sum();
        assert_eq!(total, w.total_weight());
        assert!(w.paths().iter().all(|(_, m)| *m > 0));
    }
}

#[test]
fn tmle_and_aipw_recover_the_exact_mean() {
    for k in [0, 2] {
        let f = fixture(k);
        for a in [0u8, 1] {
            let d = vec![a; k + 1];
            let truth = f.world.psi(&d);
            let weights = RegimeWeights::new(&f.data, &f.mech, &Regime::constant(k, a)).unwrap();
            for sub in [Submodel::WeightedIntercept, Submodel::CleverCovariate] {
                let r = tmle_mean(&f.data, &weights, &f.spec, sub).unwrap();
                assert!((r.psi_hat - truth).abs() < 1e-8, "K={k} a={a}: {} vs {truth}", r.psi_hat);
            }
            let q = fit_sequential_q(&f.data, &weights, &f.spec, Targeting::None).unwrap();
            assert!((aipw_mean(&weights, &q).unwrap().psi_hat - truth).abs() < 1e-8);
        }
    }
}

#[test]
fn fitted_eif_matches_the_enumerated_eif() {
    let f = fixture(2);
    let d = vec![1, 1, 1];
    let arm = fit(&f, "always", d.clone());
    let eif = ltmle::estimators::eif_values(&arm.weights, &arm.q, arm.psi).unwrap();
    for (i, p) in f.rows.iter().enumerate().step_by(97) {
        assert!((eif.total[i] - f.world.eif(&d, p)).abs() < 1e-7, "row {i}");
    }
}

#[test]
fn robust_variance_matches_exact_eif_variance() {
    for k in [0, 2] {
        let f = fixture(k);
        let n = f.data.n() as f64;
        let one = fit(&f, "always", vec![1; k + 1]);
        let zero = fit(&f, "never", vec![0; k + 1]);
        let exact_single = f.world.expect(|p| f.world.eif(&one.d, p).powi(2));
        let exact_contrast = f.world.expect(|p| (f.world.eif(&one.d, p) - f.world.eif(&zero.d, p)).powi(2));

        let single = [RobustArm { weights: &one.weights, q: &one.q, psi: one.psi, coef: 1.0 }];
        let both = [
            RobustArm { weights: &one.weights, q: &one.q, psi: one.psi, coef: 1.0 },
            RobustArm { weights: &zero.weights, q: &zero.q, psi: zero.psi, coef: -1.0 },
        ];
        for method in [RobustMethod::Tmle, RobustMethod::Ipw] {
            let v = robust_variance_total(&f.data, &single, &f.spec, method).unwrap().variance_of_psi_hat * n;
            assert!(close(v, exact_single, 1e-6), "K={k} {method:?}: {v} vs {exact_single}");
            let v = robust_variance_total(&f.data, &both, &f.spec, method).unwrap().variance_of_psi_hat * n;
            assert!(close(v, exact_contrast, 1e-6), "K={k} {method:?}: {v} vs {exact_contrast}");
        }

        // The empirical EIF variance is exact up to the n - 1 denominator.
        let a = tmle_mean(&f.data, &one.weights, &f.spec, Submodel::WeightedIntercept).unwrap();
        let b = tmle_mean(&f.data, &zero.weights, &f.spec, Submodel::WeightedIntercept).unwrap();
        let c = contrast(&[a, b], &[1.0, -1.0]).unwrap();
        let v = empirical_eif_variance(&c.eif).unwrap().variance_of_psi_hat * (n - 1.0);
        assert!(close(v, exact_contrast, 1e-6));
    }
}

fn msm_arms(arms: &[Fitted]) -> Vec<MsmArm<'_, f64>> {
    arms.iter().map(|a| MsmArm { weights: &a.weights, q: &a.q, psi: a.psi }).collect()
}

/// `g^d_{0:t-1}` along a path with the regime's treatments substituted.
fn g_regime(world: &World, d: &[u8], t: usize, p: &Path) -> f64 {
    (0..t)
        .map(|s| {
            let g1 = world.g1(s, p.w, &p.l, d);
            if d[s] == 1 {
                g1
            } else {
                1.0 - g1
            }
        })
        .product()
}

#[test]
fn plug_in_variance_matches_its_enumerated_target() {
    for k in [0, 2] {
        let f = fixture(k);
        let n = f.data.n() as f64;
        let arms = [(fit(&f, "always", vec![1; k + 1]), 1.0), (fit(&f, "never", vec![0; k + 1]), -1.0)];
        // Sequential fits of Z at level t - 1 integrate out A(t - 1) observationally.
        let sigma2 = |d: &[u8], t: usize| {
            f.world.expect(|p| {
                let z = (f.world.q_path(d, t + 1, p) - f.world.q_path(d, t, p)).powi(2) / g_regime(&f.world, d, t, p);
                f.world.clever(d, t - 1, p) * z
            })
        };
        let mut exact = f.world.expect(|p| {
            arms.iter().map(|(a, c)| c * (f.world.q_path(&a.d, 1, p) - f.world.psi(&a.d))).sum::<f64>().powi(2)
        });
        for (a, c) in &arms {
            exact += c * c * (1..=k + 1).map(|t| sigma2(&a.d, t)).sum::<f64>();
        }
        let ra: Vec<_> = arms.iter().map(|(a, c)| RobustArm { weights: &a.weights, q: &a.q, psi: a.psi, coef: *c }).collect();
        let v = robust_variance_total(&f.data, &ra, &f.spec, RobustMethod::PlugIn).unwrap().variance_of_psi_hat * n;
        assert!(close(v, exact, 1e-6), "K={k}: {v} vs {exact}");
        let consistent = robust_variance_total(&f.data, &ra, &f.spec, RobustMethod::Tmle).unwrap().variance_of_psi_hat * n;
        assert!((v - consistent).abs() > 1e-3, "K={k}: the two forms should differ here");
    }
}

#[test]
fn msm_single_regime_reduces_to_the_scalar_case() {
    for k in [0, 2] {
        let f = fixture(k);
        let arm = fit(&f, "always", vec![1; k + 1]);
        let spec = MsmSpec::constant_weights(vec![Regime::fixed("always", arm.d.clone())], &[1.0], k);
        let arms = msm_arms(std::slice::from_ref(&arm));
        let robust = robust_variance_total(
            &f.data,
            &[RobustArm { weights: &arm.weights, q: &arm.q, psi: arm.psi, coef: 1.0 }],
            &f.spec,
            RobustMethod::Tmle,
        )
        .unwrap();
        let msm = msm_variance_total(&f.data, &spec, &f.spec, &arms).unwrap();
        assert!(close(msm.variance, robust.variance_of_psi_hat, 1e-6), "K={k}");

        let last = sigma2_last_static(&f.data, &spec, &f.spec, &arms).unwrap();
        let robust_last = robust.sigma2_components.iter().find(|c| c.t == k + 1).unwrap().value;
        assert!(close(last.sigma2, robust_last, 1e-6), "K={k}: {} vs {robust_last}", last.sigma2);
    }
}

#[test]
fn msm_total_matches_enumerated_variance_with_overlapping_regimes() {
    let f = fixture(2);
    let fitted = vec![fit(&f, "111", vec![1, 1, 1]), fit(&f, "110", vec![1, 1, 0]), fit(&f, "000", vec![0, 0, 0])];
    let h = [1.0, 0.5, 2.0];
    let regimes = fitted.iter().map(|a| Regime::fixed(a.weights.label(), a.d.clone())).collect();
    let spec = MsmSpec::constant_weights(regimes, &h, 2);
    let exact = f.world.expect(|p| {
        let s: f64 = fitted.iter().zip(&h).map(|(a, &w)| w * f.world.eif(&a.d, p)).sum();
        s * s
    });
    let report = msm_variance_total(&f.data, &spec, &f.spec, &msm_arms(&fitted)).unwrap();
    assert!(close(report.sigma2, exact, 1e-6), "{} vs {exact}", report.sigma2);
}

#[test]
fn msm_last_component_matches_enumeration() {
    let f = fixture(2);
    let fitted = vec![fit(&f, "111", vec![1, 1, 1]), fit(&f, "000", vec![0, 0, 0])];
    let h = [0.7, 1.6];
    let regimes = fitted.iter().map(|a| Regime::fixed(a.weights.label(), a.d.clone())).collect();
    let spec = MsmSpec::constant_weights(regimes, &h, 2);
    let exact = f.world.expect(|p| {
        let s: f64 = fitted.iter().zip(&h).map(|(a, &w)| w * f.world.eif_components(&a.d, p)[3]).sum();
        s * s
    });
    let last = sigma2_last_static(&f.data, &spec, &f.spec, &msm_arms(&fitted)).unwrap();
    assert!(close(last.sigma2, exact, 1e-6), "{} vs {exact}", last.sigma2);
}

#[test]
fn msm_intercept_route_identity() {
    let f = fixture(2);
    let fitted = vec![fit(&f, "111", vec![1, 1, 1]), fit(&f, "100", vec![1, 0, 0]), fit(&f, "000", vec![0, 0, 0])];
    let regimes: Vec<_> = fitted.iter().map(|a| Regime::fixed(a.weights.label(), a.d.clone())).collect();
    let spec = MsmSpec::constant_weights(regimes.clone(), &[0.4, 1.0, 2.5], 2);
    let id = msm_intercept_identity_check(&f.data, &spec, &f.spec, &msm_arms(&fitted)).unwrap();
    assert!(id.holds);
    assert!((id.sigma2_intercept_route - id.sigma2_direct).abs() < 1e-8);
    assert!((id.sum_h1 - 3.9).abs() < 1e-12);

    // Equal weights: beta0 is the average of the regime means of Z(d, K+1).
    let equal = MsmSpec::constant_weights(regimes, &[1.0; 3], 2);
    let id = msm_intercept_identity_check(&f.data, &equal, &f.spec, &msm_arms(&fitted)).unwrap();
    let last = sigma2_last_static(&f.data, &equal, &f.spec, &msm_arms(&fitted)).unwrap();
    let avg = last.per_regime.iter().map(|c| c.value).sum::<f64>() / 3.0;
    assert!((id.beta0 - avg).abs() < 1e-10);
}

#[test]
fn diagonal_cross_covariance_is_the_conditional_variance() {
    let f = fixture(2);
    let arm = fit(&f, "always", vec![1, 1, 1]);
    let other = fit(&f, "110", vec![1, 1, 0]);
    let a = MsmArm { weights: &arm.weights, q: &arm.q, psi: arm.psi };
    let b = MsmArm { weights: &other.weights, q: &other.q, psi: other.psi };
    for t in 1..=3 {
        let c = sigma_t_cross_covariance(&f.data, &f.spec, &a, &a, t).unwrap();
        // The two regimes part ways at node 2.
        let cross = (t < 3).then(|| sigma_t_cross_covariance(&f.data, &f.spec, &a, &b, t).unwrap());
        if t == 3 {
            assert!(sigma_t_cross_covariance(&f.data, &f.spec, &a, &b, t).is_err());
        }
        for (i, p) in f.rows.iter().enumerate().step_by(131) {
            if !c.rows[i] {
                continue;
            }
            let exact_var = if t == 3 {
                let q = f.world.q_bar(&arm.d, 3, p.w, &p.l);
                q * (1.0 - q)
            } else {
                (0..2u8)
                    .map(|v| {
                        let mut l = p.l[..t].to_vec();
                        let pl = f.world.p_l(t, p.w, &l, &arm.d);
                        l.push(v);
                        let prob = if v == 1 { pl } else { 1.0 - pl };
                        let diff = f.world.q_bar(&arm.d, t + 1, p.w, &l) - f.world.q_bar(&arm.d, t, p.w, &p.l[..t]);
                        prob * diff * diff
                    })
                    .sum()
            };
            assert!((c.values[i] - exact_var).abs() < 1e-8, "t={t} row {i}");
            if let Some(cross) = &cross {
                assert!(cross.values[i].abs() <= (c.values[i] * 0.25).sqrt() + 1e-12);
            }
        }
    }
}
