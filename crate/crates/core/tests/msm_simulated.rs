//! MSM variance on simulated longitudinal data.

use ltmle::estimators::tmle_mean;
use ltmle::msm::{msm_intercept_identity_check, msm_variance_total, MsmArm, MsmConfig};
use ltmle::nuisance::{fit_g, NuisanceSpec, RegimeWeights, Submodel};
use ltmle::simgen::{generate, DgpConfig, Horizon};

fn config(regimes: Vec<Vec<u8>>, features: Vec<Vec<f64>>) -> MsmConfig {
    let h = vec![vec![1.0]; regimes.len()];
    MsmConfig { regimes, labels: vec![], h, features, beta: vec![], coefficient: 0 }
}

#[test]
fn variance_is_finite_on_simulated_data() {
    let spec = NuisanceSpec::longitudinal();
    let configs = [
        config(vec![vec![1, 1, 1], vec![0, 0, 0]], vec![vec![1.0, 1.0], vec![1.0, 0.0]]),
        config(
            vec![vec![0, 0, 0], vec![0, 0, 1], vec![0, 1, 1], vec![1, 1, 1]],
            vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 3.0]],
        ),
    ];
    for seed in 0..10 {
        let beta_p = [-2.0, -1.0][seed as usize % 2];
        let data = generate(&DgpConfig { horizon: Horizon::Longitudinal, beta_p, beta_psi: 1.0, n: 500, seed }).unwrap();
        let mech = fit_g(&data, &spec).unwrap();
        for cfg in &configs {
            let msm = cfg.into_spec::<f64>(data.k()).unwrap();
            let weights: Vec<_> =
                msm.regimes.iter().map(|r| RegimeWeights::new(&data, &mech, r).unwrap()).collect();
            let fits: Vec<_> =
                weights.iter().map(|w| tmle_mean(&data, w, &spec, Submodel::WeightedIntercept).unwrap()).collect();
            let arms: Vec<_> =
                weights.iter().zip(&fits).map(|(w, f)| MsmArm { weights: w, q: &f.q[0], psi: f.psi_hat }).collect();
            let v = msm_variance_total(&data, &msm, &spec, &arms).unwrap();
            assert!(v.sigma2.is_finite() && v.sigma2 >= 0.0, "seed {seed}: {}", v.sigma2);
            assert!(v.per_regime.iter().all(|c| c.value >= 0.0));
            assert!(msm_intercept_identity_check(&data, &msm, &spec, &arms).unwrap().holds);
        }
    }
}
