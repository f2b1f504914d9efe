//! Weighted, offset-capable binomial / quasi-binomial regression by
//! iteratively reweighted least squares, plus weighted least squares.
//!
//! Every nuisance fit and every targeting update in the crate goes through
//! [`fit_logistic`]. Responses may be any value in `[0, 1]`; the score
//! equations are the binomial ones, so bounded continuous pseudo-outcomes are
//! handled as a quasi-binomial fit without dispersion modelling.

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{expit, Scalar};

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design<T> {
    nrows: usize,
    ncols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Design<T> {
    pub fn new(nrows: usize, ncols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::Dimension(format!("{} values for a {nrows}x{ncols} design", data.len())));
        }
        Ok(Self { nrows, ncols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(Error::Dimension(format!("row {i} has {} columns, expected {ncols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), ncols, data)
    }

    pub fn from_columns(cols: &[Vec<T>]) -> Result<Self> {
        let nrows = cols.first().map_or(0, Vec::len);
        if let Some(c) = cols.iter().find(|c| c.len() != nrows) {
            return Err(Error::Dimension(format!("column of length {} in a {nrows}-row design", c.len())));
        }
        let ncols = cols.len();
        let mut data = vec![T::zero(); nrows * ncols];
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                data[i * ncols + j] = v;
            }
        }
        Self::new(nrows, ncols, data)
    }

    /// Single column of ones.
    pub fn intercept(nrows: usize) -> Self {
        Self { nrows, ncols: 1, data: vec![T::one(); nrows] }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.ncols + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmKind {
    Logistic,
    Linear,
}

#[derive(Debug, Clone, Serialize)]
pub struct GlmFit<T> {
    pub kind: GlmKind,
    /// One coefficient per design column; dropped columns are held at zero.
    pub coefficients: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-abs weighted score (or normal-equation residual) at the solution.
    pub final_score_norm: T,
    pub deviance: T,
    /// Columns removed because they were linearly dependent on earlier ones.
    pub dropped: Vec<usize>,
    /// A coefficient hit the separation cap.
    pub separated: bool,
}

impl<T: Scalar> GlmFit<T> {
    #[inline]
    pub fn linear_predictor_row(&self, row: &[T]) -> T {
        row.iter().zip(&self.coefficients).fold(T::zero(), |acc, (&x, &b)| acc + x * b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions<T> {
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub score_tolerance: T,
    pub deviance_tolerance: T,
    /// Bound on |coefficient| on the logit scale.
    pub coefficient_cap: T,
}

impl<T: Scalar> Default for IrlsOptions<T> {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            max_halvings: 10,
            score_tolerance: T::score_tolerance(),
            deviance_tolerance: T::deviance_tolerance(),
            coefficient_cap: T::lit(15.0),
        }
    }
}

fn check_inputs<T: Scalar>(design: &Design<T>, response: &[T], weights: &[T], offset: Option<&[T]>) -> Result<()> {
    let n = design.nrows();
    if n == 0 {
        return Err(Error::Dimension("empty design".into()));
    }
    if response.len() != n || weights.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::Dimension(format!(
            "design has {n} rows but response/weights/offset have {}/{}/{}",
            response.len(),
            weights.len(),
            offset.map_or(n, <[T]>::len)
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < T::zero()) {
        return Err(Error::Validation(format!("invalid regression weight {w}")));
    }
    Ok(())
}

/// Indices of a maximal set of linearly independent columns (in column
/// order) among rows with positive weight.
fn independent_columns<T: Scalar>(design: &Design<T>, weights: &[T]) -> Vec<usize> {
    let p = design.ncols();
    let mut gram = vec![T::zero(); p * p];
    for i in 0..design.nrows() {
        if weights[i] > T::zero() {
            let row = design.row(i);
            for a in 0..p {
                let xa = row[a] * weights[i];
                if xa == T::zero() {
                    continue;
                }
                for b in a..p {
                    gram[a * p + b] += xa * row[b];
                }
            }
        }
    }
    let tol = T::epsilon().sqrt() * T::lit(1e-2);
    let mut active: Vec<usize> = Vec::new();
    // rows of the partial Cholesky factor, indexed by position in `active`
    let mut factor: Vec<Vec<T>> = Vec::new();
    for j in 0..p {
        let gjj = gram[j * p + j];
        if gjj <= T::zero() {
            continue;
        }
        let mut lj = Vec::with_capacity(active.len());
        for (m, &c) in active.iter().enumerate() {
            let gcj = gram[c * p + j];
            let s = (0..m).fold(T::zero(), |acc, q| acc + factor[m][q] * lj[q]);
            lj.push((gcj - s) / factor[m][m]);
        }
        let d = gjj - lj.iter().fold(T::zero(), |acc, &v| acc + v * v);
        if d <= tol * gjj {
            continue;
        }
        lj.push(d.sqrt());
        factor.push(lj);
        active.push(j);
    }
    active
}

/// In-place Cholesky solve of the symmetric positive definite system `a x = b`.
fn cholesky_solve<T: Scalar>(a: &mut [T], p: usize, b: &mut [T]) -> bool {
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / d;
        }
    }
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * p + k] * b[k];
        }
        b[i] = s / a[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in i + 1..p {
            s -= a[k * p + i] * b[k];
        }
        b[i] = s / a[i * p + i];
    }
    true
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn xlogx_ratio<T: Scalar>(y: T, log_mu: T) -> T {
    if y <= T::zero() {
        T::zero()
    } else {
        y * (y.ln() - log_mu)
    }
}

struct LogisticProblem<'a, T> {
    design: &'a Design<T>,
    response: &'a [T],
    weights: &'a [T],
    offset: Option<&'a [T]>,
    active: &'a [usize],
}

impl<T: Scalar> LogisticProblem<'_, T> {
    fn eta(&self, beta: &[T], i: usize) -> T {
        let row = self.design.row(i);
        let mut e = self.offset.map_or(T::zero(), |o| o[i]);
        for (m, &c) in self.active.iter().enumerate() {
            e += row[c] * beta[m];
        }
        e
    }

    /// Binomial deviance (zero at a saturated fit).
    fn deviance(&self, beta: &[T]) -> T {
        let mut dev = T::zero();
        for i in 0..self.design.nrows() {
            let w = self.weights[i];
            if w == T::zero() {
                continue;
            }
            let eta = self.eta(beta, i);
            let y = self.response[i];
            let log_mu = -softplus(-eta);
            let log_1m = -softplus(eta);
            dev += w * (xlogx_ratio(y, log_mu) + xlogx_ratio(T::one() - y, log_1m));
        }
        dev + dev
    }

    /// Weighted score and Fisher information at `beta`.
    fn score_and_information(&self, beta: &[T], score: &mut [T], info: &mut [T]) {
        let p = self.active.len();
        score.iter_mut().for_each(|s| *s = T::zero());
        info.iter_mut().for_each(|s| *s = T::zero());
        for i in 0..self.design.nrows() {
            let w = self.weights[i];
            if w == T::zero() {
                continue;
            }
            let mu = expit(self.eta(beta, i));
            let r = w * (self.response[i] - mu);
            let v = w * mu * (T::one() - mu);
            let row = self.design.row(i);
            for a in 0..p {
                let xa = row[self.active[a]];
                score[a] += xa * r;
                let xv = xa * v;
                for b in 0..=a {
                    info[a * p + b] += xv * row[self.active[b]];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[b * p + a] = info[a * p + b];
            }
        }
    }
}

fn max_abs<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Maximizes `sum_i w_i [y_i log mu_i + (1 - y_i) log(1 - mu_i)]` with
/// `mu_i = expit(offset_i + x_i' beta)`.
///
/// Newton/IRLS with step-halving. Non-convergence and separation are
/// reported on the returned fit rather than as errors.
pub fn fit_logistic<T: Scalar>(
    design: &Design<T>,
    response: &[T],
    weights: &[T],
    offset: Option<&[T]>,
    opts: &IrlsOptions<T>,
) -> Result<GlmFit<T>> {
    check_inputs(design, response, weights, offset)?;
    for (i, (&y, &w)) in response.iter().zip(weights).enumerate() {
        if w > T::zero() && !(y >= T::zero() && y <= T::one()) {
            return Err(Error::Validation(format!("response {y} at row {i} is outside [0, 1]")));
        }
    }
    let p_full = design.ncols();
    let active = independent_columns(design, weights);
    if active.is_empty() {
        return Err(Error::Estimation("no rows with positive weight or no usable design columns".into()));
    }
    let dropped: Vec<usize> = (0..p_full).filter(|j| !active.contains(j)).collect();
    if !dropped.is_empty() {
        warn!("dropping linearly dependent design columns {dropped:?}");
    }
    let prob = LogisticProblem { design, response, weights, offset, active: &active };
    let p = active.len();
    let mut beta = vec![T::zero(); p];

    // Start the intercept at the weighted logit mean when there is no offset.
    if offset.is_none() && active[0] == 0 && (0..design.nrows()).all(|i| design.get(i, 0) == T::one()) {
        let (sw, swy) = (0..design.nrows())
            .fold((T::zero(), T::zero()), |(a, b), i| (a + weights[i], b + weights[i] * response[i]));
        let ybar = (swy / sw).max(T::lit(1e-6)).min(T::one() - T::lit(1e-6));
        beta[0] = (ybar / (T::one() - ybar)).ln();
    }

    let cap = opts.coefficient_cap;
    let mut separated = false;
    let mut score = vec![T::zero(); p];
    let mut info = vec![T::zero(); p * p];
    let mut dev = prob.deviance(&beta);
    prob.score_and_information(&beta, &mut score, &mut info);
    let mut converged = max_abs(&score) < opts.score_tolerance;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let mut step = score.clone();
        if !cholesky_solve(&mut info, p, &mut step) {
            warn!("singular information matrix in IRLS at iteration {iterations}");
            break;
        }
        let mut scale = T::one();
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut clamped = false;
            let cand: Vec<T> = beta
                .iter()
                .zip(&step)
                .map(|(&b, &s)| {
                    let v = b + scale * s;
                    if v.abs() > cap {
                        clamped = true;
                        v.max(-cap).min(cap)
                    } else {
                        v
                    }
                })
                .collect();
            let cand_dev = prob.deviance(&cand);
            if cand_dev.is_finite() && cand_dev <= dev + T::epsilon() * T::lit(16.0) * dev.abs().max(T::one()) {
                accepted = Some((cand, cand_dev, clamped));
                break;
            }
            scale = scale * T::lit(0.5);
        }
        let Some((cand, cand_dev, clamped)) = accepted else {
            break;
        };
        separated |= clamped;
        let moved = cand.iter().zip(&beta).any(|(a, b)| a != b);
        let rel_change = (dev - cand_dev).abs() / (cand_dev.abs() + T::lit(0.1));
        beta = cand;
        dev = cand_dev;
        prob.score_and_information(&beta, &mut score, &mut info);
        if max_abs(&score) < opts.score_tolerance && rel_change < opts.deviance_tolerance {
            converged = true;
        } else if !moved {
            break;
        }
    }
    if converged && max_abs(&score) >= opts.score_tolerance {
        converged = false;
    }
    if separated {
        warn!("logistic fit hit the coefficient cap of {cap}; treating as separated");
    }
    let mut coefficients = vec![T::zero(); p_full];
    for (m, &c) in active.iter().enumerate() {
        coefficients[c] = beta[m];
    }
    Ok(GlmFit {
        kind: GlmKind::Logistic,
        coefficients,
        converged,
        iterations,
        final_score_norm: max_abs(&score),
        deviance: dev,
        dropped,
        separated,
    })
}

/// `expit(offset + X beta)` row by row.
pub fn predict<T: Scalar>(fit: &GlmFit<T>, design: &Design<T>, offset: Option<&[T]>) -> Result<Vec<T>> {
    let lin = predict_linear(fit, design, offset)?;
    Ok(lin.into_iter().map(expit).collect())
}

/// `offset + X beta` row by row.
pub fn predict_linear<T: Scalar>(fit: &GlmFit<T>, design: &Design<T>, offset: Option<&[T]>) -> Result<Vec<T>> {
    if design.ncols() != fit.coefficients.len() {
        return Err(Error::Dimension(format!(
            "design has {} columns, fit has {} coefficients",
            design.ncols(),
            fit.coefficients.len()
        )));
    }
    if let Some(o) = offset {
        if o.len() != design.nrows() {
            return Err(Error::Dimension(format!("offset has {} rows, design {}", o.len(), design.nrows())));
        }
    }
    Ok((0..design.nrows())
        .map(|i| fit.linear_predictor_row(design.row(i)) + offset.map_or(T::zero(), |o| o[i]))
        .collect())
}

/// Weighted least squares through the normal equations, with one step of
/// iterative refinement.
pub fn fit_linear<T: Scalar>(design: &Design<T>, response: &[T], weights: &[T]) -> Result<GlmFit<T>> {
    check_inputs(design, response, weights, None)?;
    let p_full = design.ncols();
    let active = independent_columns(design, weights);
    if active.is_empty() {
        return Err(Error::Estimation("no rows with positive weight or no usable design columns".into()));
    }
    let dropped: Vec<usize> = (0..p_full).filter(|j| !active.contains(j)).collect();
    if !dropped.is_empty() {
        warn!("dropping linearly dependent design columns {dropped:?}");
    }
    let p = active.len();
    let mut gram = vec![T::zero(); p * p];
    for i in 0..design.nrows() {
        let w = weights[i];
        if w == T::zero() {
            continue;
        }
        let row = design.row(i);
        for a in 0..p {
            for b in 0..=a {
                gram[a * p + b] += w * row[active[a]] * row[active[b]];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[b * p + a] = gram[a * p + b];
        }
    }
    let residual_rhs = |beta: &[T]| -> Vec<T> {
        let mut r = vec![T::zero(); p];
        for i in 0..design.nrows() {
            let w = weights[i];
            if w == T::zero() {
                continue;
            }
            let row = design.row(i);
            let fitted = active.iter().zip(beta).fold(T::zero(), |acc, (&c, &b)| acc + row[c] * b);
            let e = w * (response[i] - fitted);
            for a in 0..p {
                r[a] += row[active[a]] * e;
            }
        }
        r
    };
    let mut beta = vec![T::zero(); p];
    for _ in 0..2 {
        let mut delta = residual_rhs(&beta);
        let mut g = gram.clone();
        if !cholesky_solve(&mut g, p, &mut delta) {
            return Err(Error::Estimation("singular normal equations".into()));
        }
        for (b, d) in beta.iter_mut().zip(&delta) {
            *b += *d;
        }
    }
    let resid = residual_rhs(&beta);
    let mut coefficients = vec![T::zero(); p_full];
    for (m, &c) in active.iter().enumerate() {
        coefficients[c] = beta[m];
    }
    let rss = (0..design.nrows())
        .map(|i| {
            let e = response[i] - active.iter().zip(&beta).fold(T::zero(), |acc, (&c, &b)| acc + design.get(i, c) * b);
            weights[i] * e * e
        })
        .sum();
    Ok(GlmFit {
        kind: GlmKind::Linear,
        coefficients,
        converged: true,
        iterations: 2,
        final_score_norm: max_abs(&resid),
        deviance: rss,
        dropped,
        separated: false,
    })
}
