//! Random GLM fixtures and an independent Newton solver written with nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Fixture {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub offset: Option<Vec<f64>>,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(80..400);
    let p = rng.gen_range(1..6);
    let beta: Vec<f64> = (0..=p).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fractional = rng.gen_bool(0.25);
    let with_offset = rng.gen_bool(0.3);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut offset = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![1.0];
        row.extend((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let off = if with_offset { rng.gen_range(-0.5..0.5) } else { 0.0 };
        let eta: f64 = off + row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        let mu = 1.0 / (1.0 + (-eta).exp());
        y.push(if fractional { (mu + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0) } else { rng.gen_bool(mu) as u8 as f64 });
        w.push(rng.gen_range(0.5..2.0));
        offset.push(off);
        x.push(row);
    }
    Fixture { x, y, w, offset: with_offset.then_some(offset) }
}

/// Plain Newton–Raphson on the weighted quasi-binomial likelihood.
pub fn oracle(f: &Fixture) -> DVector<f64> {
    let n = f.x.len();
    let p = f.x[0].len();
    let x = DMatrix::from_fn(n, p, |i, j| f.x[i][j]);
    let mut beta = DVector::zeros(p);
    for _ in 0..200 {
        let eta = &x * &beta;
        let mut score = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let e = eta[i] + f.offset.as_ref().map_or(0.0, |o| o[i]);
            let mu = 1.0 / (1.0 + (-e).exp());
            let xi = x.row(i).transpose();
            score += &xi * (f.w[i] * (f.y[i] - mu));
            info += &xi * xi.transpose() * (f.w[i] * mu * (1.0 - mu));
        }
        let step = info.cholesky().expect("positive definite").solve(&score);
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    beta
}
