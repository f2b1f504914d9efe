//! IRLS against an independent Newton solver written with nalgebra.

mod common;

use common::glm_reference::{fixture, oracle};
use ltmle::glm::{fit_linear, fit_logistic, predict, Design, IrlsOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn logistic_matches_reference_newton_on_200_fixtures() {
    for seed in 0..200 {
        let f = fixture(seed);
        let design = Design::from_rows(&f.x).unwrap();
        let fit = fit_logistic(&design, &f.y, &f.w, f.offset.as_deref(), &IrlsOptions::default()).unwrap();
        let reference = oracle(&f);
        assert!(fit.converged, "seed {seed}");
        assert!(fit.final_score_norm < 1e-8, "seed {seed}: score {}", fit.final_score_norm);
        for (j, (&b, &r)) in fit.coefficients.iter().zip(reference.iter()).enumerate() {
            assert!((b - r).abs() < 1e-6 * r.abs().max(1.0), "seed {seed} coef {j}: {b} vs {r}");
        }
    }
}

#[test]
fn linear_matches_normal_equations() {
    for seed in 0..50 {
        let f = fixture(1000 + seed);
        let n = f.x.len();
        let p = f.x[0].len();
        let x = DMatrix::from_fn(n, p, |i, j| f.x[i][j]);
        let wm = DMatrix::from_diagonal(&DVector::from_vec(f.w.clone()));
        let y = DVector::from_vec(f.y.clone());
        let xtwx = x.transpose() * &wm * &x;
        let reference = xtwx.cholesky().unwrap().solve(&(x.transpose() * &wm * y));
        let fit = fit_linear(&Design::from_rows(&f.x).unwrap(), &f.y, &f.w).unwrap();
        for (&b, &r) in fit.coefficients.iter().zip(reference.iter()) {
            assert!((b - r).abs() < 1e-8 * r.abs().max(1.0), "seed {seed}: {b} vs {r}");
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    for seed in 0..20 {
        let f = fixture(5000 + seed);
        let d64 = Design::from_rows(&f.x).unwrap();
        let fit64 = fit_logistic(&d64, &f.y, &f.w, f.offset.as_deref(), &IrlsOptions::default()).unwrap();
        let rows32: Vec<Vec<f32>> = f.x.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
        let y32: Vec<f32> = f.y.iter().map(|&v| v as f32).collect();
        let w32: Vec<f32> = f.w.iter().map(|&v| v as f32).collect();
        let off32: Option<Vec<f32>> = f.offset.as_ref().map(|o| o.iter().map(|&v| v as f32).collect());
        let fit32 =
            fit_logistic(&Design::from_rows(&rows32).unwrap(), &y32, &w32, off32.as_deref(), &IrlsOptions::default())
                .unwrap();
        for (&a, &b) in fit32.coefficients.iter().zip(&fit64.coefficients) {
            assert!((a as f64 - b).abs() < 1e-3 * b.abs().max(1.0), "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn separated_data_is_flagged_not_fatal() {
    let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0, i as f64 - 19.5]).collect();
    let y: Vec<f64> = (0..40).map(|i| (i >= 20) as u8 as f64).collect();
    let fit = fit_logistic(&Design::from_rows(&rows).unwrap(), &y, &[1.0; 40], None, &IrlsOptions::default()).unwrap();
    assert!(fit.separated);
    assert!(fit.coefficients.iter().all(|b| b.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fit_ignores_row_order_and_weight_scale(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let f = fixture(seed);
        let n = f.x.len();
        let base = fit_logistic(&Design::from_rows(&f.x).unwrap(), &f.y, &f.w, f.offset.as_deref(), &IrlsOptions::default()).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let x: Vec<Vec<f64>> = perm.iter().map(|&i| f.x[i].clone()).collect();
        let y: Vec<f64> = perm.iter().map(|&i| f.y[i]).collect();
        let w: Vec<f64> = perm.iter().map(|&i| f.w[i] * scale).collect();
        let off: Option<Vec<f64>> = f.offset.as_ref().map(|o| perm.iter().map(|&i| o[i]).collect());
        let other = fit_logistic(&Design::from_rows(&x).unwrap(), &y, &w, off.as_deref(), &IrlsOptions::default()).unwrap();
        for (a, b) in base.coefficients.iter().zip(&other.coefficients) {
            prop_assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn predictions_are_probabilities(seed in 0u64..10_000) {
        let f = fixture(seed);
        let design = Design::from_rows(&f.x).unwrap();
        let fit = fit_logistic(&design, &f.y, &f.w, None, &IrlsOptions::default()).unwrap();
        let p = predict(&fit, &design, None).unwrap();
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
