//! Supervised initialization, site summaries, aggregation, tuning by BIC,
//! the final estimator, the extra communication round and intervals.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{standardize_columns, CoefficientVector, Dataset, Diagnostics, FitResult};
use crate::error::{Result, SashError};
use crate::kernel::{KernelSpec, WeightScheme};
use crate::metrics::stratified_folds;
use crate::simfit::{
    default_bandwidth, default_iterations, fit_local_sim, linearize_at, log_grid,
    LambdaSchedule, LinearizedProblem, LocalSimFit, RateInputs, SimFitConfig,
};
use crate::solvers::{
    lasso_logistic_path, logistic_2param_information, logistic_loss, sigmoid,
    solve_constrained_lasso_quadratic, solve_logistic_2param, LogisticFit, QuadraticProblem,
    SolverOptions,
};

/// Smallest admissible |β₁| of the supervised fit.
pub const ANCHOR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Config {
    /// Explicit λ grid; when absent a log-spaced grid is built from the data.
    pub lambda_grid: Option<Vec<f64>>,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub folds: usize,
    pub seed: u64,
    pub anchor_floor: f64,
    /// Fit on standardized covariates and map back.
    pub standardize: bool,
    pub solver: SolverOptions,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            lambda_grid: None,
            n_lambda: 50,
            lambda_ratio: 0.01,
            folds: 5,
            seed: 1,
            anchor_floor: ANCHOR_FLOOR,
            standardize: false,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step1Fit {
    pub alpha: f64,
    pub beta_sup: Array1<f64>,
    pub gamma_sup: CoefficientVector,
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Mean held-out deviance per grid value (`inf` where a fold's path stopped).
    pub cv_deviance: Vec<f64>,
}

/// Grid from `λ_max` (all free coefficients zero at the intercept-plus-anchor
/// MLE) down to `ratio · λ_max`.
pub fn supervised_lambda_grid(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    count: usize,
    ratio: f64,
) -> Result<Vec<f64>> {
    let (a, b1) = solve_logistic_2param(x.column(0), y)?;
    let n = y.len() as f64;
    let resid: Array1<f64> = (0..y.len())
        .map(|i| sigmoid(a + b1 * x[[i, 0]]) - y[i])
        .collect();
    let grad = x.t().dot(&resid) / n;
    let lmax = grad.iter().skip(1).fold(0.0f64, |m, v| m.max(v.abs()));
    if !(lmax > 0.0) {
        return Ok(vec![0.0]);
    }
    Ok(log_grid(lmax, ratio, count))
}

fn heldout_deviance(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, fit: &LogisticFit) -> f64 {
    let eta = x.dot(&fit.beta);
    2.0 * eta
        .iter()
        .zip(y.iter())
        .map(|(e, yi)| logistic_loss(*yi, fit.alpha + e))
        .sum::<f64>()
        / y.len() as f64
}

/// K-fold stratified CV of the penalized logistic path by held-out deviance.
/// Returns the mean deviance per λ.
pub fn cv_lasso_logistic(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    grid: &[f64],
    folds: usize,
    seed: u64,
    solver: &SolverOptions,
) -> Result<Vec<f64>> {
    let labels = stratified_folds(y, folds, seed)?;
    let mut total = vec![0.0; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| labels[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| labels[i] == f).collect();
        let xt = x.select(ndarray::Axis(0), &train);
        let yt = y.select(ndarray::Axis(0), &train);
        let xv = x.select(ndarray::Axis(0), &test);
        let yv = y.select(ndarray::Axis(0), &test);
        let path = lasso_logistic_path(xt.view(), yt.view(), grid, false, solver)?;
        for (g, t) in total.iter_mut().enumerate() {
            match path.get(g) {
                Some(fit) => *t += heldout_deviance(xv.view(), yv.view(), fit),
                None => *t = f64::INFINITY,
            }
        }
    }
    Ok(total.into_iter().map(|t| t / folds as f64).collect())
}

fn argmin_prefer_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// CV-tuned penalized logistic fit on labeled rows with β₁ unpenalized;
/// returns the fit and its direction `β/β₁`.
pub fn step1_supervised_init(labeled: &Dataset, cfg: &Step1Config) -> Result<Step1Fit> {
    let lab = labeled.labeled()?;
    let (work, scaling) = if cfg.standardize {
        let constant: Vec<usize> = (0..lab.p())
            .filter(|&j| {
                let x = lab.x();
                let c = x.column(j);
                c.iter().all(|&v| v == c[0])
            })
            .collect();
        let (d, s) = standardize_columns(&lab, &constant)?;
        (d, Some(s))
    } else {
        (lab, None)
    };
    let x = work.x();
    let y = work.y().ok_or(SashError::Empty("no labeled rows".into()))?;
    let grid = match &cfg.lambda_grid {
        Some(g) if !g.is_empty() => {
            let mut g = g.clone();
            g.sort_by(|a, b| b.total_cmp(a));
            g
        }
        _ => supervised_lambda_grid(x, y, cfg.n_lambda, cfg.lambda_ratio)?,
    };
    let cv = if grid.len() > 1 {
        cv_lasso_logistic(x, y, &grid, cfg.folds, cfg.seed, &cfg.solver)?
    } else {
        vec![0.0]
    };
    let best = argmin_prefer_first(&cv);
    let path = lasso_logistic_path(x, y, &grid[..=best], false, &cfg.solver)?;
    let fit = path.last().cloned().ok_or(SashError::Empty("empty lambda path".into()))?;
    if path.len() <= best {
        log::warn!("supervised path stopped before the CV-selected lambda");
    }
    let (alpha, beta) = match &scaling {
        Some(s) => s.unscale_beta(fit.alpha, fit.beta.view()),
        None => (fit.alpha, fit.beta.clone()),
    };
    if beta[0].abs() < cfg.anchor_floor || !beta[0].is_finite() {
        return Err(SashError::WeakAnchor {
            value: beta[0],
            floor: cfg.anchor_floor,
        });
    }
    let gamma_sup = CoefficientVector::direction_from_beta(beta.view())?;
    Ok(Step1Fit {
        alpha,
        beta_sup: beta,
        gamma_sup,
        lambda: fit.lambda,
        grid,
        cv_deviance: cv,
    })
}

/// Index of the covariate with the largest absolute coefficient in a
/// penalized logistic fit, for choosing the anchor when none is known.
pub fn screen_anchor(labeled: &Dataset, cfg: &Step1Config) -> Result<usize> {
    let lab = labeled.labeled()?;
    let y = lab.y().ok_or(SashError::Empty("no labeled rows".into()))?;
    let fits = lasso_logistic_path(
        lab.x(),
        y,
        &log_grid(0.1, 0.1, cfg.n_lambda.max(2)),
        true,
        &cfg.solver,
    )?;
    let beta = &fits.last().ok_or(SashError::Empty("empty path".into()))?.beta;
    Ok(argmax_abs(beta.view()))
}

fn argmax_abs(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// Second- and first-order summaries of one site's linearized loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site_id: usize,
    pub n_m: usize,
    pub omega_xx: Array2<f64>,
    pub omega_xs: Array1<f64>,
    pub sigma2: f64,
    /// Linearization point; kept locally and never put on the wire.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_local: Option<CoefficientVector>,
}

impl SiteSummary {
    pub fn p(&self) -> usize {
        self.omega_xs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if self.omega_xx.dim() != (p, p) {
            return Err(SashError::Dimension(format!(
                "site {}: omega_xx is {:?} but omega_xs has length {p}",
                self.site_id,
                self.omega_xx.dim()
            )));
        }
        if self.n_m == 0 || !(self.sigma2 >= 0.0) {
            return Err(SashError::InvalidInput(format!(
                "site {}: need N_m > 0 and sigma2 >= 0",
                self.site_id
            )));
        }
        QuadraticProblem::new(self.omega_xx.clone(), self.omega_xs.clone(), 0.0, true)
            .map(|_| ())
            .map_err(|e| e.at_site(self.site_id))
    }
}

fn summary_from_problem(site_id: usize, lp: &LinearizedProblem) -> Result<SiteSummary> {
    let (a, b) = lp.gram();
    Ok(SiteSummary {
        site_id,
        n_m: lp.n_total,
        omega_xx: a,
        omega_xs: b,
        sigma2: lp.loss_at_point(),
        gamma_local: Some(CoefficientVector::direction(lp.at.clone())?),
    })
}

/// Summaries at the fitted local direction, reusing the fit's final
/// linearization. The kernel and weights must be those of the fit.
pub fn compute_site_summary(
    d: &Dataset,
    fit: &LocalSimFit,
    k: &KernelSpec,
    w: WeightScheme,
) -> Result<SiteSummary> {
    let lp = &fit.final_problem;
    if lp.n_total == d.n_rows() && lp.at == fit.gamma.values() {
        return summary_from_problem(d.site_id(), lp);
    }
    site_summary_at(d, &fit.gamma, k, w)
}

/// Summaries of the linearization at an arbitrary direction.
pub fn site_summary_at(
    d: &Dataset,
    gamma: &CoefficientVector,
    k: &KernelSpec,
    w: WeightScheme,
) -> Result<SiteSummary> {
    let lp = linearize_at(d, gamma.values(), k, w).map_err(|e| e.at_site(d.site_id()))?;
    summary_from_problem(d.site_id(), &lp)
}

/// `Ξ = −(1/N)Σ φ̂ (S − f̂) ∂γf̂` at the linearization point, so that
/// `Ω̂xs = −Ξ + Ω̂xx γ`.
pub fn compute_xi(lp: &LinearizedProblem) -> Array1<f64> {
    let mut xi = Array1::<f64>::zeros(lp.design.ncols());
    for i in 0..lp.kept.len() {
        xi.scaled_add(-lp.weights[i] * lp.residual[i], &lp.design.row(i));
    }
    xi / lp.n_total as f64
}

/// The N_m-weighted combination of site summaries.
#[derive(Debug, Clone)]
pub struct PooledSummary {
    /// `(1/N) Σ N_m Ω̂xx`.
    pub a: Array2<f64>,
    /// `(1/N) Σ N_m Ω̂xs`.
    pub b: Array1<f64>,
    pub n_total: usize,
    /// `Σ N_m σ̂²_m / N`.
    pub sigma2: f64,
    pub sites: Vec<usize>,
}

impl PooledSummary {
    /// `γ'Aγ − 2γ'b`.
    pub fn quadratic(&self, gamma: ArrayView1<'_, f64>) -> f64 {
        gamma.dot(&self.a.dot(&gamma)) - 2.0 * gamma.dot(&self.b)
    }
}

/// Pools summaries in ascending site order, independent of arrival order.
pub fn pool(summaries: &[SiteSummary]) -> Result<PooledSummary> {
    let Some(first) = summaries.first() else {
        return Err(SashError::Empty("no site summaries".into()));
    };
    let p = first.p();
    let mut order: Vec<&SiteSummary> = summaries.iter().collect();
    order.sort_by_key(|s| s.site_id);
    for w in order.windows(2) {
        if w[0].site_id == w[1].site_id {
            return Err(SashError::InvalidInput(format!(
                "duplicate summary for site {}",
                w[0].site_id
            )));
        }
    }
    let n_total: usize = order.iter().map(|s| s.n_m).sum();
    let mut a = Array2::<f64>::zeros((p, p));
    let mut b = Array1::<f64>::zeros(p);
    let mut sigma2 = 0.0;
    for s in &order {
        if s.p() != p || s.omega_xx.dim() != (p, p) {
            return Err(SashError::Dimension(format!(
                "site {} has dimension {} but expected {p}",
                s.site_id,
                s.p()
            )));
        }
        let w = s.n_m as f64;
        a.scaled_add(w, &s.omega_xx);
        b.scaled_add(w, &s.omega_xs);
        sigma2 += w * s.sigma2;
    }
    let n = n_total as f64;
    Ok(PooledSummary {
        a: a / n,
        b: b / n,
        n_total,
        sigma2: sigma2 / n,
        sites: order.iter().map(|s| s.site_id).collect(),
    })
}

pub fn aggregate_direction(
    summaries: &[SiteSummary],
    lambda: f64,
    opts: &SolverOptions,
) -> Result<CoefficientVector> {
    let pooled = pool(summaries)?;
    let q = QuadraticProblem::new(pooled.a, pooled.b, lambda, true)?;
    solve_constrained_lasso_quadratic(&q, opts)
}

/// `(α̂, β̂₁)` of the logistic model on `u = Xγ` over labeled rows.
pub fn refit_scale(labeled: &Dataset, gamma: &CoefficientVector) -> Result<(f64, f64)> {
    let lab = labeled.labeled()?;
    let y = lab.y().ok_or(SashError::Empty("no labeled rows".into()))?;
    let u = lab.x().dot(&gamma.values());
    solve_logistic_2param(u.view(), y)
}

/// The composite objective for the final direction:
/// `(1/(N+n))[N(γ'Aγ − 2γ'b) + 2Σℓ(Y, α+β₁γ'X)] + λ‖γ₋₁‖₁`.
#[derive(Debug, Clone, Copy)]
pub struct RefineObjective<'a> {
    pub pooled: &'a PooledSummary,
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
    pub alpha: f64,
    pub beta1: f64,
}

impl RefineObjective<'_> {
    fn total(&self) -> f64 {
        (self.pooled.n_total + self.y.len()) as f64
    }

    pub fn labeled_loss(&self, gamma: ArrayView1<'_, f64>) -> f64 {
        if self.y.is_empty() {
            return 0.0;
        }
        let u = self.x.dot(&gamma);
        u.iter()
            .zip(self.y.iter())
            .map(|(ui, yi)| logistic_loss(*yi, self.alpha + self.beta1 * ui))
            .sum()
    }

    pub fn smooth(&self, gamma: ArrayView1<'_, f64>) -> f64 {
        let n = self.pooled.n_total as f64;
        (n * self.pooled.quadratic(gamma) + 2.0 * self.labeled_loss(gamma)) / self.total()
    }

    pub fn gradient(&self, gamma: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.pooled.n_total as f64;
        let mut g = (self.pooled.a.dot(&gamma) - &self.pooled.b) * (2.0 * n);
        if !self.y.is_empty() {
            let u = self.x.dot(&gamma);
            let r: Array1<f64> = u
                .iter()
                .zip(self.y.iter())
                .map(|(ui, yi)| sigmoid(self.alpha + self.beta1 * ui) - yi)
                .collect();
            g.scaled_add(2.0 * self.beta1, &self.x.t().dot(&r));
        }
        g / self.total()
    }

    pub fn objective(&self, gamma: ArrayView1<'_, f64>, lambda: f64) -> f64 {
        self.smooth(gamma) + lambda * gamma.iter().skip(1).map(|v| v.abs()).sum::<f64>()
    }

    pub fn kkt_residual(&self, gamma: ArrayView1<'_, f64>, lambda: f64) -> f64 {
        let g = self.gradient(gamma);
        let diag_floor = 1e-14 * (0..g.len()).map(|j| self.pooled.a[[j, j]]).fold(0.0, f64::max);
        let mut worst: f64 = 0.0;
        for j in 1..g.len() {
            let curvature = self.pooled.a[[j, j]]
                + self.x.column(j).iter().map(|v| v * v).sum::<f64>() * self.beta1 * self.beta1;
            if curvature <= diag_floor {
                continue;
            }
            let v = if gamma[j] != 0.0 {
                (g[j] + lambda * gamma[j].signum()).abs()
            } else {
                (g[j].abs() - lambda).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Smallest λ at which `e₁` is optimal.
    pub fn lambda_max(&self) -> f64 {
        let e1 = CoefficientVector::e1(self.pooled.b.len());
        self.gradient(e1.values())
            .iter()
            .skip(1)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(1/2)` of the smooth part's Hessian at `gamma`, scaled to the
    /// quadratic-lasso convention.
    fn half_hessian(&self, gamma: ArrayView1<'_, f64>) -> Array2<f64> {
        let n = self.pooled.n_total as f64;
        let mut h = &self.pooled.a * n;
        if !self.y.is_empty() && self.beta1 != 0.0 {
            let u = self.x.dot(&gamma);
            let w: Array1<f64> = u
                .iter()
                .map(|ui| {
                    let p = sigmoid(self.alpha + self.beta1 * ui);
                    p * (1.0 - p) * self.beta1 * self.beta1
                })
                .collect();
            let xw = &self.x * &w.view().insert_axis(ndarray::Axis(1));
            h += &self.x.t().dot(&xw);
        }
        h / self.total()
    }
}

/// Minimizes the composite objective by proximal Newton steps: each step
/// solves the anchored quadratic lasso of the local second-order model and
/// backtracks on the exact objective.
pub fn refine_direction_pooled(
    obj: &RefineObjective<'_>,
    lambda_dagger: f64,
    opts: &SolverOptions,
) -> Result<CoefficientVector> {
    opts.validate()?;
    let p = obj.pooled.b.len();
    if obj.x.ncols() != p {
        return Err(SashError::Dimension(format!(
            "labeled covariates have {} columns but summaries {p}",
            obj.x.ncols()
        )));
    }
    let mut gamma = match &opts.warm_start {
        Some(w) if w.len() == p => {
            let mut g = w.clone();
            g[0] = 1.0;
            g
        }
        _ => CoefficientVector::e1(p).into_inner(),
    };
    let mut current = obj.objective(gamma.view(), lambda_dagger);
    let mut residual = obj.kkt_residual(gamma.view(), lambda_dagger);
    for _ in 0..200 {
        if residual <= opts.tol {
            return CoefficientVector::direction(gamma);
        }
        let ah = obj.half_hessian(gamma.view());
        let grad = obj.gradient(gamma.view());
        // model: γ'Hγ − 2γ'(Hγ_k − ∇/2) + λ‖γ‖ with H the half Hessian
        let bq = ah.dot(&gamma) - &(grad * 0.5);
        let q = QuadraticProblem::unchecked(ah, bq, lambda_dagger, true)?;
        let inner = SolverOptions {
            tol: (opts.tol * 1e-2).max(1e-14),
            warm_start: Some(gamma.clone()),
            ..opts.clone()
        };
        let target = match solve_constrained_lasso_quadratic(&q, &inner) {
            Ok(t) => t.into_inner(),
            Err(SashError::NoConvergence { .. }) => {
                solve_constrained_lasso_quadratic(&q, &opts.with_warm_start(Some(gamma.clone())))?
                    .into_inner()
            }
            Err(e) => return Err(e),
        };
        let dir = &target - &gamma;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &gamma + &(step * &dir);
            let val = obj.objective(cand.view(), lambda_dagger);
            if val <= current + 1e-13 * current.abs().max(1.0) {
                gamma = cand;
                current = val;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        residual = obj.kkt_residual(gamma.view(), lambda_dagger);
        if !accepted {
            if residual <= opts.tol {
                break;
            }
            return Err(SashError::LineSearch {
                steps: 50,
                objective: current,
            });
        }
    }
    if residual <= opts.tol {
        CoefficientVector::direction(gamma)
    } else {
        Err(SashError::NoConvergence {
            iterations: 200,
            residual,
        })
    }
}

/// Final direction from summaries and labeled rows at a given `λ†`.
#[allow(clippy::too_many_arguments)]
pub fn refine_direction(
    summaries: &[SiteSummary],
    labeled: &Dataset,
    alpha: f64,
    beta1: f64,
    lambda_dagger: f64,
    opts: &SolverOptions,
) -> Result<CoefficientVector> {
    let pooled = pool(summaries)?;
    let lab = labeled.labeled()?;
    let y = lab.y().ok_or(SashError::Empty("no labeled rows".into()))?;
    let obj = RefineObjective {
        pooled: &pooled,
        x: lab.x(),
        y,
        alpha,
        beta1,
    };
    refine_direction_pooled(&obj, lambda_dagger, opts)
}

#[derive(Debug, Clone, Copy)]
pub enum BicMode<'a> {
    /// Information criterion for the summary-only direction.
    Bic1,
    /// Criterion for the final direction, including labeled deviance.
    Bic2 {
        x: ArrayView2<'a, f64>,
        y: ArrayView1<'a, f64>,
        alpha: f64,
        beta1: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BicSelection {
    pub lambda: f64,
    pub gamma: CoefficientVector,
    pub index: usize,
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    pub df: Vec<usize>,
}

/// BIC over a λ grid. The fit term is on the scale of the total sample:
///
/// ```text
/// BIC1 = N(γ'Aγ − 2γ'b)/σ̂² + df log N
/// BIC2 = N(γ'Aγ − 2γ'b)/σ̂² + 2Σℓ(Y, α̂+β̂₁γ'X) + df log(N+n)
/// ```
///
/// with `σ̂²` the N_m-weighted pooled variance and `df = nnz(γ)`. Grid
/// values are visited from largest to smallest with warm starts; ties go to
/// the larger λ.
pub fn bic_select(
    pooled: &PooledSummary,
    mode: BicMode<'_>,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<BicSelection> {
    if grid.is_empty() {
        return Err(SashError::Empty("empty lambda grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    let n = pooled.n_total as f64;
    let sigma2 = pooled.sigma2.max(f64::MIN_POSITIVE);
    let mut scores = Vec::with_capacity(grid.len());
    let mut dfs = Vec::with_capacity(grid.len());
    let mut gammas: Vec<CoefficientVector> = Vec::with_capacity(grid.len());
    let mut warm: Option<Array1<f64>> = None;
    let mut q = QuadraticProblem::unchecked(pooled.a.clone(), pooled.b.clone(), 0.0, true)?;
    for &lambda in &grid {
        let o = opts.with_warm_start(warm.clone());
        let (gamma, score) = match mode {
            BicMode::Bic1 => {
                q.set_lambda(lambda);
                let g = solve_constrained_lasso_quadratic(&q, &o)?;
                let s = n * pooled.quadratic(g.values()) / sigma2
                    + g.nnz() as f64 * n.ln();
                (g, s)
            }
            BicMode::Bic2 { x, y, alpha, beta1 } => {
                let obj = RefineObjective {
                    pooled,
                    x,
                    y,
                    alpha,
                    beta1,
                };
                let g = refine_direction_pooled(&obj, lambda, &o)?;
                let s = n * pooled.quadratic(g.values()) / sigma2
                    + 2.0 * obj.labeled_loss(g.values())
                    + g.nnz() as f64 * (n + y.len() as f64).ln();
                (g, s)
            }
        };
        warm = Some(gamma.values().to_owned());
        dfs.push(gamma.nnz());
        scores.push(score);
        gammas.push(gamma);
    }
    let index = argmin_prefer_first(&scores);
    Ok(BicSelection {
        lambda: grid[index],
        gamma: gammas.swap_remove(index),
        index,
        grid,
        scores,
        df: dfs,
    })
}

pub fn bic1_grid(pooled: &PooledSummary, count: usize) -> Result<Vec<f64>> {
    let q = QuadraticProblem::unchecked(pooled.a.clone(), pooled.b.clone(), 0.0, true)?;
    let lmax = q.lambda_max();
    Ok(if lmax > 0.0 {
        log_grid(lmax, 1e-3, count)
    } else {
        vec![0.0]
    })
}

pub fn bic2_grid(obj: &RefineObjective<'_>, count: usize) -> Vec<f64> {
    let lmax = obj.lambda_max();
    if lmax > 0.0 {
        log_grid(lmax, 1e-3, count)
    } else {
        vec![0.0]
    }
}

pub fn assemble_sash(
    gamma_dagger: CoefficientVector,
    alpha: f64,
    beta1: f64,
    diagnostics: Diagnostics,
) -> Result<FitResult> {
    FitResult::assemble(gamma_dagger, alpha, beta1, diagnostics)
}

/// Which entry of the inverse information is used as the slope variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CiEntry {
    /// The slope diagonal under (intercept, slope) ordering.
    #[default]
    Slope,
    /// The literal first diagonal entry (the intercept's).
    LiteralFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub sigma1: f64,
}

/// Interval for `x'β` that treats the direction as fixed:
/// `β̂₁x'γ̂† ± n^{-1/2} z σ̂₁ |x'γ̂†|` with `σ̂₁²` from the inverse of the
/// per-observation information of the two-parameter model.
pub fn confidence_interval(
    labeled: &Dataset,
    fit: &FitResult,
    x: ArrayView1<'_, f64>,
    delta: f64,
    entry: CiEntry,
) -> Result<ConfidenceInterval> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SashError::InvalidInput(format!("delta must lie in (0, 1), got {delta}")));
    }
    let lab = labeled.labeled()?;
    if x.len() != lab.p() {
        return Err(SashError::Dimension(format!(
            "query has length {} but the model has {} covariates",
            x.len(),
            lab.p()
        )));
    }
    let u = lab.x().dot(&fit.gamma_dagger.values());
    let info = logistic_2param_information(u.view(), fit.alpha, fit.beta1);
    let det = info[0][0] * info[1][1] - info[0][1] * info[0][1];
    if !(det > 1e-14 * (info[0][0] * info[1][1]).abs().max(f64::MIN_POSITIVE)) {
        return Err(SashError::DegenerateIndex("singular information matrix".into()));
    }
    let var = match entry {
        CiEntry::Slope => info[0][0] / det,
        CiEntry::LiteralFirst => info[1][1] / det,
    };
    let sigma1 = var.sqrt();
    let z = Normal::new(0.0, 1.0)
        .map_err(|e| SashError::InvalidInput(e.to_string()))?
        .inverse_cdf(1.0 - delta / 2.0);
    let xg = x.dot(&fit.gamma_dagger.values());
    let center = fit.beta1 * xg;
    let half = z * sigma1 * xg.abs() / (lab.n_rows() as f64).sqrt();
    Ok(ConfidenceInterval {
        lower: center - half,
        upper: center + half,
        level: 1.0 - delta,
        sigma1,
    })
}

/// How the penalty of each local iteration is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// CV per iteration, scaled by the theoretical schedule's shape.
    CvShaped,
    /// CV per iteration.
    Cv,
    /// Theoretical schedule with unit constants.
    Theoretical,
    Fixed(Vec<f64>),
}

/// Per-site fitting options; unset values take data-driven defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFitOptions {
    pub bandwidth: Option<f64>,
    pub weights: Option<WeightScheme>,
    pub max_iter: Option<usize>,
    pub schedule: ScheduleMode,
    pub cv_folds: usize,
    pub cv_grid: usize,
    pub convergence_tol: f64,
    pub solver: SolverOptions,
}

impl Default for SiteFitOptions {
    fn default() -> Self {
        Self {
            bandwidth: None,
            weights: None,
            max_iter: None,
            schedule: ScheduleMode::CvShaped,
            cv_folds: 5,
            cv_grid: 30,
            convergence_tol: 1e-4,
            solver: SolverOptions::default(),
        }
    }
}

impl SiteFitOptions {
    pub fn kernel_for(&self, d: &Dataset) -> Result<KernelSpec> {
        KernelSpec::gaussian(self.bandwidth.unwrap_or_else(|| default_bandwidth(d.n_rows())))
    }

    pub fn weights_for(&self, d: &Dataset) -> WeightScheme {
        self.weights.unwrap_or_else(|| WeightScheme::infer(d.s()))
    }

    /// Config for one site. `sparsity` and `n_labeled` feed the schedule's
    /// rate inputs.
    pub fn config_for(&self, d: &Dataset, sparsity: usize, n_labeled: usize) -> Result<SimFitConfig> {
        Ok(self.config_for_rows(
            d.n_rows(),
            d.p(),
            self.kernel_for(d)?,
            self.weights_for(d),
            sparsity,
            n_labeled,
        ))
    }

    pub fn config_for_rows(
        &self,
        n_rows: usize,
        p: usize,
        kernel: KernelSpec,
        weights: WeightScheme,
        sparsity: usize,
        n_labeled: usize,
    ) -> SimFitConfig {
        let max_iter = self.max_iter.unwrap_or_else(|| default_iterations(n_rows));
        let rates = RateInputs {
            s: sparsity.max(1) as f64,
            p: p as f64,
            n: n_labeled.max(1) as f64,
            n_m: n_rows as f64,
            h: kernel.bandwidth,
        };
        let lambda_schedule = match &self.schedule {
            ScheduleMode::CvShaped => LambdaSchedule::CvPerIteration {
                folds: self.cv_folds,
                grid_size: self.cv_grid,
                shape: Some(rates),
            },
            ScheduleMode::Cv => LambdaSchedule::CvPerIteration {
                folds: self.cv_folds,
                grid_size: self.cv_grid,
                shape: None,
            },
            ScheduleMode::Theoretical => LambdaSchedule::Theoretical(rates),
            ScheduleMode::Fixed(v) => LambdaSchedule::FixedSequence(v.clone()),
        };
        SimFitConfig {
            max_iter,
            lambda_schedule,
            kernel,
            weights,
            solver: self.solver.clone(),
            convergence_tol: self.convergence_tol,
        }
    }
}

/// Which direction the extra round broadcasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Broadcast {
    /// The final direction `γ̂†`.
    #[default]
    Refined,
    /// The summary-only direction `γ̂`.
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SashConfig {
    pub step1: Step1Config,
    pub site: SiteFitOptions,
    pub bic_grid: usize,
    pub ci_entry: CiEntry,
    pub broadcast: Broadcast,
    pub allow_partial: bool,
}

impl Default for SashConfig {
    fn default() -> Self {
        Self {
            step1: Step1Config::default(),
            site: SiteFitOptions::default(),
            bic_grid: 40,
            ci_entry: CiEntry::Slope,
            broadcast: Broadcast::Refined,
            allow_partial: false,
        }
    }
}

/// Local Step II at one site: fit from the broadcast direction and
/// summarize.
pub fn site_fit(
    d: &Dataset,
    gamma_sup: &CoefficientVector,
    n_labeled: usize,
    opts: &SiteFitOptions,
) -> Result<(LocalSimFit, SiteSummary)> {
    let cfg = opts.config_for(d, gamma_sup.nnz(), n_labeled)?;
    let fit = fit_local_sim(d, gamma_sup, &cfg).map_err(|e| e.at_site(d.site_id()))?;
    let summary = compute_site_summary(d, &fit, &cfg.kernel, cfg.weights)?;
    Ok((fit, summary))
}

/// Output of the aggregation step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step3Output {
    pub gamma_hat: CoefficientVector,
    pub lambda: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub lambda_dagger: f64,
    pub fit: FitResult,
}

/// Aggregation, scale refit and refinement with BIC tuning of both penalties.
pub fn step3(summaries: &[SiteSummary], labeled: &Dataset, cfg: &SashConfig) -> Result<Step3Output> {
    let pooled = pool(summaries)?;
    let solver = &cfg.site.solver;
    let grid1 = bic1_grid(&pooled, cfg.bic_grid)?;
    let sel1 = bic_select(&pooled, BicMode::Bic1, &grid1, solver)?;
    let (alpha, beta1) = refit_scale(labeled, &sel1.gamma)?;
    let lab = labeled.labeled()?;
    let y = lab.y().ok_or(SashError::Empty("no labeled rows".into()))?;
    let obj = RefineObjective {
        pooled: &pooled,
        x: lab.x(),
        y,
        alpha,
        beta1,
    };
    let grid2 = bic2_grid(&obj, cfg.bic_grid);
    let sel2 = bic_select(
        &pooled,
        BicMode::Bic2 {
            x: lab.x(),
            y,
            alpha,
            beta1,
        },
        &grid2,
        solver,
    )?;
    let mut diag = Diagnostics::new();
    diag.insert("lambda".into(), sel1.lambda.into());
    diag.insert("lambda_dagger".into(), sel2.lambda.into());
    diag.insert("df_gamma_hat".into(), sel1.gamma.nnz().into());
    diag.insert("df_gamma_dagger".into(), sel2.gamma.nnz().into());
    diag.insert("n_total".into(), pooled.n_total.into());
    diag.insert("sites".into(), serde_json::to_value(&pooled.sites)?);
    let fit = assemble_sash(sel2.gamma, alpha, beta1, diag)?;
    Ok(Step3Output {
        gamma_hat: sel1.gamma,
        lambda: sel1.lambda,
        alpha,
        beta1,
        lambda_dagger: sel2.lambda,
        fit,
    })
}

/// Everything produced by one in-process run.
#[derive(Debug, Clone)]
pub struct SashRun {
    pub step1: Step1Fit,
    pub local: Vec<LocalSimFit>,
    pub summaries: Vec<SiteSummary>,
    pub step3: Step3Output,
}

/// Full in-process pipeline. `sites[0]` carries the labeled rows.
pub fn run_sash(sites: &[Dataset], cfg: &SashConfig) -> Result<SashRun> {
    let labeled = sites.first().ok_or(SashError::Empty("no sites".into()))?;
    let step1 = step1_supervised_init(labeled, &cfg.step1)?;
    let n_lab = labeled.n_labeled();
    let mut local = Vec::with_capacity(sites.len());
    let mut summaries = Vec::with_capacity(sites.len());
    for d in sites {
        match site_fit(d, &step1.gamma_sup, n_lab, &cfg.site) {
            Ok((fit, summary)) => {
                local.push(fit);
                summaries.push(summary);
            }
            Err(e) if cfg.allow_partial && d.site_id() != labeled.site_id() => {
                log::warn!("excluding site {}: {e}", d.site_id());
            }
            Err(e) => return Err(e),
        }
    }
    let step3 = step3(&summaries, labeled, cfg)?;
    Ok(SashRun {
        step1,
        local,
        summaries,
        step3,
    })
}

/// Recomputes every site's summaries at a broadcast direction without
/// further local iterations. Failing sites are dropped only when
/// `allow_partial` is set.
pub fn sash_plus_round(
    gamma: &CoefficientVector,
    sites: &[Dataset],
    opts: &SiteFitOptions,
    allow_partial: bool,
) -> Result<Vec<SiteSummary>> {
    let mut out = Vec::with_capacity(sites.len());
    let mut failures = Vec::new();
    for d in sites {
        let res = opts
            .kernel_for(d)
            .and_then(|k| site_summary_at(d, gamma, &k, opts.weights_for(d)));
        match res {
            Ok(s) => out.push(s),
            Err(e) if allow_partial => {
                log::warn!("site {} did not respond: {e}", d.site_id());
                failures.push(d.site_id());
            }
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(SashError::Empty(format!(
            "no site returned summaries (failed: {failures:?})"
        )));
    }
    Ok(out)
}

/// One extra communication round after a completed run.
pub fn run_sash_plus(sites: &[Dataset], prior: &SashRun, cfg: &SashConfig) -> Result<Step3Output> {
    let labeled = sites.first().ok_or(SashError::Empty("no sites".into()))?;
    let gamma = match cfg.broadcast {
        Broadcast::Refined => &prior.step3.fit.gamma_dagger,
        Broadcast::Aggregated => &prior.step3.gamma_hat,
    };
    let summaries = sash_plus_round(gamma, sites, &cfg.site, cfg.allow_partial)?;
    step3(&summaries, labeled, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn summary(site: usize, n: usize, a: Array2<f64>, b: Array1<f64>, s2: f64) -> SiteSummary {
        SiteSummary {
            site_id: site,
            n_m: n,
            omega_xx: a,
            omega_xs: b,
            sigma2: s2,
            gamma_local: None,
        }
    }

    #[test]
    fn pooling_is_order_free_and_weighted() {
        let s1 = summary(1, 10, Array2::eye(2), array![1.0, 0.0], 1.0);
        let s2 = summary(2, 30, Array2::eye(2) * 3.0, array![0.0, 2.0], 2.0);
        let p = pool(&[s2.clone(), s1.clone()]).unwrap();
        let q = pool(&[s1, s2]).unwrap();
        assert_eq!(p.a, q.a);
        assert_eq!(p.b, q.b);
        assert_eq!(p.a[[0, 0]], 2.5);
        assert_eq!(p.b, array![0.25, 1.5]);
        assert_eq!(p.sigma2, 1.75);
        assert_eq!(p.sites, vec![1, 2]);
    }

    #[test]
    fn duplicated_sites_are_rejected() {
        let s = summary(1, 10, Array2::eye(2), array![1.0, 0.0], 1.0);
        assert!(pool(&[s.clone(), s]).is_err());
    }

    #[test]
    fn assembled_estimate_scales_direction() {
        let g = CoefficientVector::direction(array![1.0, 0.0, -0.5]).unwrap();
        let f = assemble_sash(g.clone(), 0.1, 2.0, Diagnostics::new()).unwrap();
        assert_eq!(f.beta_sash.values()[0], 2.0);
        assert_eq!(f.beta_sash.nnz(), 2);
        let z = assemble_sash(g, 0.1, 0.0, Diagnostics::new()).unwrap();
        assert!(z.beta_sash.values().iter().all(|v| *v == 0.0));
    }
}
