//! Convex solvers: the anchored quadratic lasso, the ℓ1-penalized logistic
//! regression and the two-parameter logistic MLE.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::audit;
use crate::data::CoefficientVector;
use crate::error::{Result, SashError};

/// Divergence cap on the logit scale.
pub const COEF_CAP: f64 = 50.0;
const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;
// Sweeps over the support between full sweeps.
const ACTIVE_BURST: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol: f64,
    #[serde(default)]
    pub warm_start: Option<Array1<f64>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol: 1e-8,
            warm_start: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(SashError::InvalidInput(format!(
                "solver options need max_iter >= 1 and tol > 0 (got {}, {})",
                self.max_iter, self.tol
            )));
        }
        Ok(())
    }

    pub fn with_warm_start(&self, w: Option<Array1<f64>>) -> Self {
        Self {
            warm_start: w,
            ..self.clone()
        }
    }
}

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// `γ'Aγ − 2γ'b + λ‖γ_free‖₁`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticProblem {
    a: Array2<f64>,
    b: Array1<f64>,
    lambda: f64,
    fixed_first: bool,
}

impl QuadraticProblem {
    /// Validates symmetry and positive semidefiniteness, then symmetrizes.
    pub fn new(a: Array2<f64>, b: Array1<f64>, lambda: f64, fixed_first: bool) -> Result<Self> {
        let q = Self::unchecked(a, b, lambda, fixed_first)?;
        q.check_psd()?;
        Ok(q)
    }

    /// Validates shapes and symmetry only.
    pub fn unchecked(
        mut a: Array2<f64>,
        b: Array1<f64>,
        lambda: f64,
        fixed_first: bool,
    ) -> Result<Self> {
        let p = b.len();
        if a.dim() != (p, p) || p == 0 {
            return Err(SashError::Dimension(format!(
                "quadratic form {:?} with linear term of length {p}",
                a.dim()
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(SashError::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(SashError::InvalidInput("quadratic problem has non-finite entries".into()));
        }
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..p {
            for j in 0..i {
                if (a[[i, j]] - a[[j, i]]).abs() > SYMMETRY_TOL * scale {
                    return Err(SashError::InvalidInput(format!(
                        "quadratic form is not symmetric at ({i}, {j})"
                    )));
                }
                let m = 0.5 * (a[[i, j]] + a[[j, i]]);
                a[[i, j]] = m;
                a[[j, i]] = m;
            }
        }
        Ok(Self {
            a,
            b,
            lambda,
            fixed_first,
        })
    }

    pub fn check_psd(&self) -> Result<()> {
        let min = min_eigenvalue(self.a.view());
        let scale = self.a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if min < -PSD_TOL * scale {
            return Err(SashError::NotPositiveSemidefinite { min_eigenvalue: min });
        }
        Ok(())
    }

    pub fn a(&self) -> ArrayView2<'_, f64> {
        self.a.view()
    }

    pub fn b(&self) -> ArrayView1<'_, f64> {
        self.b.view()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn fixed_first(&self) -> bool {
        self.fixed_first
    }

    pub fn p(&self) -> usize {
        self.b.len()
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    fn first_free(&self) -> usize {
        usize::from(self.fixed_first)
    }

    /// Objective value (the constant penalty on a fixed coordinate is dropped).
    pub fn objective(&self, gamma: ArrayView1<'_, f64>) -> f64 {
        let ag = self.a.dot(&gamma);
        let pen: f64 = gamma.iter().skip(self.first_free()).map(|v| v.abs()).sum();
        gamma.dot(&ag) - 2.0 * gamma.dot(&self.b) + self.lambda * pen
    }

    /// Largest violation of the subgradient conditions.
    pub fn kkt_residual(&self, gamma: ArrayView1<'_, f64>) -> f64 {
        let ag = self.a.dot(&gamma);
        let mut worst: f64 = 0.0;
        if self.fixed_first && gamma[0] != 1.0 {
            return f64::INFINITY;
        }
        for j in self.first_free()..self.p() {
            if self.a[[j, j]] <= degenerate_diag(&self.a) {
                continue;
            }
            let g = 2.0 * (ag[j] - self.b[j]);
            let v = if gamma[j] != 0.0 {
                (g + self.lambda * gamma[j].signum()).abs()
            } else {
                (g.abs() - self.lambda).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Smallest λ for which the solution is `e₁` (or zero when unanchored).
    pub fn lambda_max(&self) -> f64 {
        let start = self.first_free();
        (start..self.p())
            .map(|j| {
                let base = if self.fixed_first { self.a[[j, 0]] } else { 0.0 };
                2.0 * (base - self.b[j]).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn degenerate_diag(a: &Array2<f64>) -> f64 {
    let max = (0..a.nrows()).map(|j| a[[j, j]].abs()).fold(0.0, f64::max);
    1e-14 * max.max(f64::MIN_POSITIVE)
}

pub fn min_eigenvalue(a: ArrayView2<'_, f64>) -> f64 {
    let p = a.nrows();
    let m = Mat::<f64>::from_fn(p, p, |i, j| a[[i, j]]);
    let ev = m.self_adjoint_eigenvalues(Side::Lower);
    crate::simd::zero_upper();
    match ev {
        Ok(ev) => ev.first().copied().unwrap_or(0.0),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Solves the quadratic lasso by cyclic coordinate descent.
///
/// With `fixed_first`, `γ₁ = 1` is substituted and the remaining coordinates
/// solve a lasso with linear term `b₋₁ − A₋₁,₁`. Coordinates whose diagonal
/// vanishes are held at zero.
pub fn solve_constrained_lasso_quadratic(
    q: &QuadraticProblem,
    opts: &SolverOptions,
) -> Result<CoefficientVector> {
    opts.validate()?;
    let p = q.p();
    let start = q.first_free();
    let mut gamma = match &opts.warm_start {
        Some(w) if w.len() == p => w.clone(),
        Some(w) => {
            return Err(SashError::Dimension(format!(
                "warm start has length {} but problem has {p}",
                w.len()
            )))
        }
        None => {
            let mut g = Array1::zeros(p);
            if q.fixed_first {
                g[0] = 1.0;
            }
            g
        }
    };
    if q.fixed_first {
        gamma[0] = 1.0;
    }
    let floor = degenerate_diag(&q.a);
    for j in start..p {
        if q.a[[j, j]] <= floor {
            gamma[j] = 0.0;
        }
    }
    let mut ag = q.a.dot(&gamma);
    let half = 0.5 * q.lambda;
    let mut residual = f64::INFINITY;
    let mut active_only = false;
    let mut burst = 0;
    for _sw in 0..opts.max_iter {
        let mut max_change: f64 = 0.0;
        for j in start..p {
            let ajj = q.a[[j, j]];
            if ajj <= floor || (active_only && gamma[j] == 0.0) {
                continue;
            }
            let old = gamma[j];
            let r = q.b[j] - (ag[j] - ajj * old);
            let new = soft_threshold(r, half) / ajj;
            if new != old {
                let delta = new - old;
                gamma[j] = new;
                ag.scaled_add(delta, &q.a.column(j));
                max_change = max_change.max(delta.abs() * ajj.sqrt());
            }
        }
        if active_only {
            burst += 1;
            if max_change < 0.1 * opts.tol || burst >= ACTIVE_BURST {
                active_only = false;
                burst = 0;
            }
            continue;
        }
        residual = q.kkt_residual(gamma.view());
        if residual > opts.tol && polish(q, &mut gamma, start) {
            ag = q.a.dot(&gamma);
            residual = q.kkt_residual(gamma.view());
        }
        if residual <= opts.tol {
            let out = finish(q, gamma)?;
            audit::record_quadratic(q, out.values(), opts.tol);
            return Ok(out);
        }
        active_only = true;
    }
    residual = residual.min(q.kkt_residual(gamma.view()));
    if residual <= opts.tol {
        let out = finish(q, gamma)?;
        audit::record_quadratic(q, out.values(), opts.tol);
        return Ok(out);
    }
    Err(SashError::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

// Feature-sign step: move toward the exact minimizer on the current support
// with signs held fixed, stopping at the first coordinate that would cross
// zero. The objective is quadratic along that segment, so this never
// increases it. Returns whether `gamma` changed.
fn polish(q: &QuadraticProblem, gamma: &mut Array1<f64>, start: usize) -> bool {
    let support: Vec<usize> = (start..q.p()).filter(|&j| gamma[j] != 0.0).collect();
    if support.is_empty() {
        return false;
    }
    let k = support.len();
    let a = Mat::from_fn(k, k, |i, j| q.a[[support[i], support[j]]]);
    let rhs = Mat::from_fn(k, 1, |i, _| {
        let j = support[i];
        let fixed = if start == 1 { q.a[[j, 0]] * gamma[0] } else { 0.0 };
        q.b[j] - fixed - 0.5 * q.lambda * gamma[j].signum()
    });
    let factor = a.llt(Side::Lower);
    let sol = factor.map(|llt| llt.solve(&rhs));
    crate::simd::zero_upper();
    let Ok(sol) = sol else {
        return false;
    };
    let mut t = 1.0f64;
    let mut hit = None;
    for (i, &j) in support.iter().enumerate() {
        let v = sol[(i, 0)];
        if !v.is_finite() {
            return false;
        }
        if v.signum() != gamma[j].signum() {
            let tj = gamma[j] / (gamma[j] - v);
            if tj < t {
                t = tj;
                hit = Some(j);
            }
        }
    }
    let before = q.objective(gamma.view());
    let mut cand = gamma.clone();
    for (i, &j) in support.iter().enumerate() {
        cand[j] += t * (sol[(i, 0)] - gamma[j]);
    }
    if let Some(j) = hit {
        cand[j] = 0.0;
    }
    if q.objective(cand.view()) <= before {
        *gamma = cand;
        true
    } else {
        false
    }
}

fn finish(q: &QuadraticProblem, gamma: Array1<f64>) -> Result<CoefficientVector> {
    if q.fixed_first {
        CoefficientVector::direction(gamma)
    } else {
        CoefficientVector::beta(gamma)
    }
}

/// Logistic negative log-likelihood of one observation with linear predictor `eta`.
pub fn logistic_loss(y: f64, eta: f64) -> f64 {
    softplus(eta) - y * eta
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_binary(y: ArrayView1<'_, f64>) -> Result<()> {
    if y.len() < 2 {
        return Err(SashError::InvalidInput("need at least two labels".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(SashError::InvalidInput("labels must be 0 or 1".into()));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == y.len() {
        return Err(SashError::SingleClass);
    }
    Ok(())
}

/// A fitted penalized logistic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub alpha: f64,
    pub beta: Array1<f64>,
    pub lambda: f64,
}

/// `(1/n)Σℓ(Y_i, α+β'X_i) + λ‖β_pen‖₁`.
pub fn lasso_logistic_objective(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    alpha: f64,
    beta: ArrayView1<'_, f64>,
    lambda: f64,
    penalize_first: bool,
) -> f64 {
    let eta = x.dot(&beta);
    let n = y.len() as f64;
    let loss: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(&e, &yi)| logistic_loss(yi, alpha + e))
        .sum::<f64>()
        / n;
    let skip = usize::from(!penalize_first);
    loss + lambda * beta.iter().skip(skip).map(|v| v.abs()).sum::<f64>()
}

fn constant_columns(x: ArrayView2<'_, f64>) -> Vec<bool> {
    x.columns()
        .into_iter()
        .map(|c| {
            let first = c[0];
            c.iter().all(|&v| v == first)
        })
        .collect()
}

/// Largest subgradient violation for the penalized logistic problem.
pub fn lasso_logistic_kkt_residual(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    fit: &LogisticFit,
    penalize_first: bool,
) -> f64 {
    let n = y.len() as f64;
    let eta = x.dot(&fit.beta);
    let resid: Array1<f64> = eta
        .iter()
        .zip(y.iter())
        .map(|(&e, &yi)| sigmoid(fit.alpha + e) - yi)
        .collect();
    let grad = x.t().dot(&resid) / n;
    let constant = constant_columns(x);
    let mut worst = (resid.sum() / n).abs();
    for j in 0..fit.beta.len() {
        if constant[j] {
            continue;
        }
        let penalized = j > 0 || penalize_first;
        let v = if !penalized {
            grad[j].abs()
        } else if fit.beta[j] != 0.0 {
            (grad[j] + fit.lambda * fit.beta[j].signum()).abs()
        } else {
            (grad[j].abs() - fit.lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// ℓ1-penalized logistic regression with an unpenalized intercept and, unless
/// `penalize_first`, an unpenalized first coefficient.
///
/// Proximal Newton on mean-centered columns: each outer step fits the
/// weighted least-squares approximation by coordinate descent and then
/// backtracks on the true objective.
pub fn solve_lasso_logistic(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    penalize_first: bool,
    opts: &SolverOptions,
) -> Result<LogisticFit> {
    opts.validate()?;
    check_binary(y)?;
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(SashError::Dimension(format!("x has {n} rows, y has {}", y.len())));
    }
    if !(lambda >= 0.0) {
        return Err(SashError::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    let means = x.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(p));
    let xc = &x - &means;
    let warm = match &opts.warm_start {
        // warm start layout: [alpha, beta...]
        Some(w) if w.len() == p + 1 => {
            let b = w.slice(ndarray::s![1..]).to_owned();
            Some((w[0] + means.dot(&b), b))
        }
        Some(w) => {
            return Err(SashError::Dimension(format!(
                "warm start has length {} but expected {}",
                w.len(),
                p + 1
            )))
        }
        None => None,
    };
    let shift = 1.0 + means.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let centered = prox_newton_logistic(
        xc.view(),
        y,
        lambda,
        penalize_first,
        opts.max_iter,
        opts.tol / shift,
        warm,
    )?;
    let fit = LogisticFit {
        alpha: centered.alpha - means.dot(&centered.beta),
        beta: centered.beta,
        lambda,
    };
    let residual = lasso_logistic_kkt_residual(x, y, &fit, penalize_first);
    if residual <= opts.tol {
        return accept_logistic(x, y, fit, penalize_first, opts.tol);
    }
    Err(SashError::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

fn prox_newton_logistic(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    penalize_first: bool,
    max_iter: usize,
    tol: f64,
    warm: Option<(f64, Array1<f64>)>,
) -> Result<LogisticFit> {
    let (n, p) = x.dim();
    let constant = constant_columns(x);
    let ybar = y.mean().unwrap_or(0.5);
    let (mut alpha, mut beta) = match warm {
        Some((a, b)) => (a, b),
        None => (logit(ybar), Array1::zeros(p)),
    };
    for j in 0..p {
        if constant[j] {
            beta[j] = 0.0;
        }
    }
    let nf = n as f64;
    let obj = |a: f64, b: ArrayView1<'_, f64>| {
        lasso_logistic_objective(x, y, a, b, lambda, penalize_first)
    };
    let mut current = obj(alpha, beta.view());
    let free: Vec<usize> = (0..p)
        .filter(|&j| !constant[j] && x.column(j).dot(&x.column(j)) > 0.0)
        .collect();
    let mut residual = f64::INFINITY;
    for _outer in 0..max_iter.min(500) {
        let fit = LogisticFit {
            alpha,
            beta: beta.clone(),
            lambda,
        };
        residual = lasso_logistic_kkt_residual(x, y, &fit, penalize_first);
        if residual <= tol {
            return Ok(fit);
        }
        let eta = x.dot(&beta) + alpha;
        let mut w = Array1::<f64>::zeros(n);
        let mut r = Array1::<f64>::zeros(n);
        for i in 0..n {
            let pi = sigmoid(eta[i]);
            let wi = (pi * (1.0 - pi)).max(1e-10);
            w[i] = wi;
            // residual of the working response z = eta + (y - p)/w
            r[i] = (y[i] - pi) / wi;
        }
        let wsum = w.sum();
        let wcol: Vec<f64> = (0..p)
            .map(|j| {
                x.column(j)
                    .iter()
                    .zip(w.iter())
                    .map(|(a, b)| a * a * b)
                    .sum::<f64>()
            })
            .collect();
        // inner coordinate descent on (1/2n)Σ w (r − Δα − x'Δβ)² + λ‖β‖,
        // alternating full sweeps with sweeps over the nonzero coordinates
        let inner_tol = (0.1 * residual).min(1e-3).max(tol * 1e-2);
        let sweep = |coords: &[usize], new_alpha: &mut f64, new_beta: &mut Array1<f64>, r: &mut Array1<f64>| {
            let mut max_change: f64 = 0.0;
            let da = r.dot(&w) / wsum;
            if da != 0.0 {
                *new_alpha += da;
                *r -= da;
                max_change = max_change.max(da.abs() * (wsum / nf).sqrt());
            }
            for &j in coords {
                let xj = x.column(j);
                let denom = wcol[j] / nf;
                if denom <= 0.0 {
                    continue;
                }
                let old = new_beta[j];
                let grad: f64 = xj
                    .iter()
                    .zip(w.iter())
                    .zip(r.iter())
                    .map(|((a, b), c)| a * b * c)
                    .sum::<f64>()
                    / nf;
                let z = grad + denom * old;
                let penalized = j > 0 || penalize_first;
                let new = if penalized {
                    soft_threshold(z, lambda) / denom
                } else {
                    z / denom
                };
                if new != old {
                    let delta = new - old;
                    new_beta[j] = new;
                    r.scaled_add(-delta, &xj);
                    max_change = max_change.max(delta.abs() * denom.sqrt());
                }
            }
            max_change
        };
        let mut new_alpha = alpha;
        let mut new_beta = beta.clone();
        let mut sweeps = 0;
        while sweeps < max_iter {
            let change = sweep(&free, &mut new_alpha, &mut new_beta, &mut r);
            sweeps += 1;
            if change < inner_tol {
                break;
            }
            let active: Vec<usize> = free.iter().copied().filter(|&j| new_beta[j] != 0.0).collect();
            while sweeps < max_iter {
                sweeps += 1;
                if sweep(&active, &mut new_alpha, &mut new_beta, &mut r) < inner_tol {
                    break;
                }
            }
        }
        // backtracking on the exact objective
        let dir_a = new_alpha - alpha;
        let dir_b = &new_beta - &beta;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let ca = alpha + step * dir_a;
            let cb = &beta + &(step * &dir_b);
            let val = obj(ca, cb.view());
            if val <= current + 1e-14 * current.abs().max(1.0) {
                alpha = ca;
                beta = cb;
                current = val;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if beta.iter().chain(std::iter::once(&alpha)).any(|v| !v.is_finite())
            || beta.iter().any(|v| v.abs() > COEF_CAP)
        {
            return Err(SashError::QuasiSeparation { cap: COEF_CAP });
        }
        if !accepted {
            break;
        }
    }
    let fit = LogisticFit {
        alpha,
        beta,
        lambda,
    };
    residual = residual.min(lasso_logistic_kkt_residual(x, y, &fit, penalize_first));
    if residual <= tol {
        return Ok(fit);
    }
    Err(SashError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

// A stationary point that interpolates every label is a separated fit whose
// gradient merely underflowed below tolerance.
fn accept_logistic(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    fit: LogisticFit,
    penalize_first: bool,
    tol: f64,
) -> Result<LogisticFit> {
    let eta = x.dot(&fit.beta);
    let separated = eta
        .iter()
        .zip(y.iter())
        .all(|(&e, &yi)| (sigmoid(fit.alpha + e) - yi).abs() < 1e-6);
    if separated {
        return Err(SashError::QuasiSeparation { cap: COEF_CAP });
    }
    audit::record_logistic(x, y, &fit, penalize_first, tol);
    Ok(fit)
}

/// Fits a decreasing λ path with warm starts. The path stops at the first λ
/// whose fit diverges; at least one fit must succeed.
pub fn lasso_logistic_path(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambdas: &[f64],
    penalize_first: bool,
    opts: &SolverOptions,
) -> Result<Vec<LogisticFit>> {
    let mut fits: Vec<LogisticFit> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let warm = fits.last().map(|f| {
            let mut w = Array1::zeros(f.beta.len() + 1);
            w[0] = f.alpha;
            w.slice_mut(ndarray::s![1..]).assign(&f.beta);
            w
        });
        match solve_lasso_logistic(x, y, lambda, penalize_first, &opts.with_warm_start(warm)) {
            Ok(f) => fits.push(f),
            Err(e @ (SashError::QuasiSeparation { .. } | SashError::NoConvergence { .. }))
                if !fits.is_empty() =>
            {
                log::debug!("lambda path stopped at {lambda:e}: {e}");
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(fits)
}

/// Newton–Raphson MLE of `Y ~ g(α + β₁u)` with step halving.
pub fn solve_logistic_2param(u: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<(f64, f64)> {
    solve_logistic_2param_weighted(u, y, None)
}

pub(crate) fn solve_logistic_2param_weighted(
    u: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    weights: Option<ArrayView1<'_, f64>>,
) -> Result<(f64, f64)> {
    check_binary(y)?;
    if u.len() != y.len() {
        return Err(SashError::Dimension(format!(
            "index has length {} but labels {}",
            u.len(),
            y.len()
        )));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(SashError::DegenerateIndex("non-finite index values".into()));
    }
    let n = u.len() as f64;
    let mean = u.sum() / n;
    let var = u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-14 * mean.abs().max(1.0).powi(2)) {
        return Err(SashError::DegenerateIndex("index has zero variance".into()));
    }
    let wt = |i: usize| weights.map_or(1.0, |w| w[i]);
    let nll = |a: f64, b: f64| -> f64 {
        (0..u.len())
            .map(|i| wt(i) * logistic_loss(y[i], a + b * u[i]))
            .sum::<f64>()
            / n
    };
    let ybar = y.mean().unwrap_or(0.5);
    let (mut a, mut b) = (logit(ybar), 0.0);
    let mut f = nll(a, b);
    for _ in 0..200 {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..u.len() {
            let pi = sigmoid(a + b * u[i]);
            let wi = wt(i);
            let r = wi * (pi - y[i]);
            let v = wi * pi * (1.0 - pi);
            g0 += r;
            g1 += r * u[i];
            h00 += v;
            h01 += v * u[i];
            h11 += v * u[i] * u[i];
        }
        let (g0, g1) = (g0 / n, g1 / n);
        if g0.hypot(g1) <= 1e-10 {
            return Ok((a, b));
        }
        let (h00, h01, h11) = (h00 / n, h01 / n, h11 / n);
        let det = h00 * h11 - h01 * h01;
        let (d0, d1) = if det > 1e-300 {
            ((h11 * g0 - h01 * g1) / det, (h00 * g1 - h01 * g0) / det)
        } else {
            (g0, g1)
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let (na, nb) = (a - step * d0, b - step * d1);
            let nf = nll(na, nb);
            if nf <= f {
                moved = (na, nb) != (a, b);
                a = na;
                b = nb;
                f = nf;
                break;
            }
            step *= 0.5;
        }
        if b.abs() > COEF_CAP || a.abs() > COEF_CAP || !f.is_finite() {
            return Err(SashError::QuasiSeparation { cap: COEF_CAP });
        }
        if !moved {
            break;
        }
    }
    // final gradient check after the step-halving loop stalls
    let (mut g0, mut g1) = (0.0, 0.0);
    for i in 0..u.len() {
        let r = wt(i) * (sigmoid(a + b * u[i]) - y[i]);
        g0 += r;
        g1 += r * u[i];
    }
    let g = (g0 / n).hypot(g1 / n);
    if g <= 1e-8 {
        Ok((a, b))
    } else {
        Err(SashError::NoConvergence {
            iterations: 200,
            residual: g,
        })
    }
}

/// Observed information `(1/n) Z'WZ` of the two-parameter model with
/// `Z = (1, u)`.
pub fn logistic_2param_information(u: ArrayView1<'_, f64>, alpha: f64, beta1: f64) -> [[f64; 2]; 2] {
    let n = u.len() as f64;
    let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
    for &ui in u.iter() {
        let pi = sigmoid(alpha + beta1 * ui);
        let v = pi * (1.0 - pi);
        h00 += v;
        h01 += v * ui;
        h11 += v * ui * ui;
    }
    [[h00 / n, h01 / n], [h01 / n, h11 / n]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, p: usize) -> Array2<f64> {
        let m = Array2::from_shape_fn((p + 3, p), |_| rng.random_range(-1.0..1.0));
        m.t().dot(&m) / (p as f64)
    }

    #[test]
    fn identity_closed_form() {
        let q = QuadraticProblem::new(Array2::eye(3), array![0.5, 0.3, -0.2], 0.2, true).unwrap();
        let g = solve_constrained_lasso_quadratic(&q, &SolverOptions::default()).unwrap();
        let expect = [1.0, 0.2, -0.1];
        for (a, b) in g.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn large_lambda_returns_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_psd(&mut rng, 6);
        let b = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
        let q = QuadraticProblem::new(a, b, 0.0, true).unwrap();
        let lmax = q.lambda_max();
        let q = q.with_lambda(lmax);
        let g = solve_constrained_lasso_quadratic(&q, &SolverOptions::default()).unwrap();
        assert_eq!(g.values(), CoefficientVector::e1(6).values());
    }

    #[test]
    fn zero_lambda_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = 5;
        let mut a = random_psd(&mut rng, p);
        for j in 0..p {
            a[[j, j]] += 0.5;
        }
        let b = Array1::from_shape_fn(p, |_| rng.random_range(-1.0..1.0));
        let q = QuadraticProblem::new(a.clone(), b.clone(), 0.0, true).unwrap();
        let opts = SolverOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let g = solve_constrained_lasso_quadratic(&q, &opts).unwrap();
        // A₋₁,₋₁ γ₋₁ = b₋₁ − A₋₁,₁ via faer
        let m = Mat::<f64>::from_fn(p - 1, p - 1, |i, j| a[[i + 1, j + 1]]);
        let rhs = Mat::<f64>::from_fn(p - 1, 1, |i, _| b[i + 1] - a[[i + 1, 0]]);
        let sol = m.partial_piv_lu().solve(&rhs);
        for j in 1..p {
            assert!((g.values()[j] - sol[(j - 1, 0)]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let a = array![[1.0, 0.0], [0.0, -1.0]];
        let err = QuadraticProblem::new(a, array![0.0, 0.0], 0.1, true).unwrap_err();
        assert!(matches!(err, SashError::NotPositiveSemidefinite { .. }));
        let a = array![[1.0, 0.5], [0.0, 1.0]];
        assert!(QuadraticProblem::new(a, array![0.0, 0.0], 0.1, true).is_err());
    }

    #[test]
    fn scaling_leaves_argmin_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_psd(&mut rng, 8);
        let b = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let opts = SolverOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let q1 = QuadraticProblem::new(a.clone(), b.clone(), 0.05, true).unwrap();
        let q2 = QuadraticProblem::new(&a * 7.5, &b * 7.5, 0.05 * 7.5, true).unwrap();
        let g1 = solve_constrained_lasso_quadratic(&q1, &opts).unwrap();
        let g2 = solve_constrained_lasso_quadratic(&q2, &opts).unwrap();
        for (x, y) in g1.values().iter().zip(g2.values().iter()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn two_param_symmetric_origin() {
        let (a, b) =
            solve_logistic_2param(array![1.0, -1.0, 1.0, -1.0].view(), array![1.0, 1.0, 0.0, 0.0].view())
                .unwrap();
        assert!(a.abs() < 1e-12 && b.abs() < 1e-12);
        let err = solve_logistic_2param(array![1.0, 2.0].view(), array![1.0, 1.0].view()).unwrap_err();
        assert!(matches!(err, SashError::SingleClass));
        let err = solve_logistic_2param(array![1.0, 1.0].view(), array![0.0, 1.0].view()).unwrap_err();
        assert!(matches!(err, SashError::DegenerateIndex(_)));
    }

    #[test]
    fn logistic_all_zero_design() {
        let x = Array2::zeros((4, 3));
        let y = array![1.0, 0.0, 0.0, 0.0];
        let fit = solve_lasso_logistic(x.view(), y.view(), 0.1, false, &SolverOptions::default())
            .unwrap();
        assert!((fit.alpha - logit(0.25)).abs() < 1e-8);
        assert!(fit.beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn separable_data_is_reported() {
        let x = array![[-2.0], [-1.0], [1.0], [2.0]];
        let y = array![0.0, 0.0, 1.0, 1.0];
        let err = solve_lasso_logistic(x.view(), y.view(), 0.0, false, &SolverOptions::default())
            .unwrap_err();
        assert!(matches!(err, SashError::QuasiSeparation { .. }));
    }
}
