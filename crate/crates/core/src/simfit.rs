//! Local sparse single-index fit: iteratively linearized, warm-started
//! ℓ1-penalized weighted least squares with the anchor fixed at one.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{CoefficientVector, Dataset};
use crate::error::{Result, SashError};
use crate::kernel::{evaluate_link, predict_link, KernelSpec, WeightScheme};
use crate::solvers::{solve_constrained_lasso_quadratic, QuadraticProblem, SolverOptions};

/// Rate ingredients of the theoretical penalty schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub s: f64,
    pub p: f64,
    pub n: f64,
    pub n_m: f64,
    pub h: f64,
}

/// Clamp for the supervised rate when `s log p / n >= 1`.
pub const BASE_RATE_CLAMP: f64 = 0.99;

impl RateInputs {
    /// `√(s log p / n)`, clamped below one. The flag reports clamping.
    pub fn base_rate(&self) -> (f64, bool) {
        let r = (self.s * self.p.ln() / self.n).sqrt();
        if r >= 1.0 || !r.is_finite() {
            (BASE_RATE_CLAMP, true)
        } else {
            (r, false)
        }
    }

    /// Switch point `t′ = ⌈log₂(log h / log base) + 1⌉` (one when `h >= 1`).
    pub fn t_prime(&self) -> usize {
        let (base, _) = self.base_rate();
        if self.h >= 1.0 {
            return 1;
        }
        let v = ((self.h.ln() / base.ln()).log2() + 1.0).ceil();
        if v.is_finite() && v >= 1.0 {
            v as usize
        } else {
            1
        }
    }
}

/// Theoretical λ_t: `base^{2^t}` before the switch point, then
/// `√(log p / N_m) + base^{2^{t′}} h^{t−t′}`.
pub fn lambda_schedule_theoretical(t: usize, t_prime: usize, rates: &RateInputs) -> f64 {
    let (base, _) = rates.base_rate();
    if t < t_prime {
        base.powf(2f64.powi(t as i32))
    } else {
        (rates.p.ln() / rates.n_m).sqrt()
            + base.powf(2f64.powi(t_prime as i32)) * rates.h.powi((t - t_prime) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaSchedule {
    /// The theoretical schedule with unit constants.
    Theoretical(RateInputs),
    /// λ chosen by K-fold CV on each linearized problem. With `shape`, the
    /// CV value is scaled by `λ_theory(t)/λ_theory(T)` so early iterations
    /// are penalized harder.
    CvPerIteration {
        folds: usize,
        grid_size: usize,
        shape: Option<RateInputs>,
    },
    /// One value per iteration; the last value repeats.
    FixedSequence(Vec<f64>),
}

impl LambdaSchedule {
    /// First iteration at which λ sits at its final level, so that a small
    /// step means convergence rather than heavy early shrinkage.
    pub fn settled_from(&self) -> usize {
        match self {
            LambdaSchedule::Theoretical(r)
            | LambdaSchedule::CvPerIteration { shape: Some(r), .. } => r.t_prime(),
            LambdaSchedule::CvPerIteration { shape: None, .. } => 1,
            LambdaSchedule::FixedSequence(v) => v.len().max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFitConfig {
    pub max_iter: usize,
    pub lambda_schedule: LambdaSchedule,
    pub kernel: KernelSpec,
    pub weights: WeightScheme,
    pub solver: SolverOptions,
    pub convergence_tol: f64,
}

/// `⌈log₂ log N⌉ + 3`.
pub fn default_iterations(n_rows: usize) -> usize {
    let l = (n_rows.max(3) as f64).ln().log2().ceil().max(0.0);
    l as usize + 3
}

/// `N^{-1/6}`.
pub fn default_bandwidth(n_rows: usize) -> f64 {
    (n_rows.max(1) as f64).powf(-1.0 / 6.0)
}

impl SimFitConfig {
    pub fn for_site(n_rows: usize, weights: WeightScheme) -> Result<Self> {
        Ok(Self {
            max_iter: default_iterations(n_rows),
            lambda_schedule: LambdaSchedule::CvPerIteration {
                folds: 5,
                grid_size: 30,
                shape: None,
            },
            kernel: KernelSpec::gaussian(default_bandwidth(n_rows))?,
            weights,
            solver: SolverOptions::default(),
            convergence_tol: 1e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(SashError::InvalidInput("max_iter must be >= 1".into()));
        }
        if let LambdaSchedule::FixedSequence(v) = &self.lambda_schedule {
            if v.is_empty() || v.iter().any(|l| !(*l >= 0.0)) {
                return Err(SashError::InvalidInput(
                    "fixed lambda sequence must be nonempty and nonnegative".into(),
                ));
            }
        }
        if let LambdaSchedule::CvPerIteration {
            folds, grid_size, ..
        } = &self.lambda_schedule
        {
            if *folds < 2 || *grid_size == 0 {
                return Err(SashError::InvalidInput(
                    "cv schedule needs folds >= 2 and a nonempty grid".into(),
                ));
            }
        }
        self.solver.validate()
    }
}

/// Rows of the weighted least-squares problem at one linearization point.
#[derive(Debug, Clone)]
pub struct LinearizedProblem {
    /// Row `i` is `∂γ f̂(X_i)`.
    pub design: Array2<f64>,
    /// `S_i − f̂(X_i) + γ'∂γ f̂(X_i)`.
    pub response: Array1<f64>,
    pub weights: Array1<f64>,
    /// `S_i − f̂(X_i)` on kept rows.
    pub residual: Array1<f64>,
    /// Original row indices of the kept rows.
    pub kept: Vec<usize>,
    /// Row count of the source dataset; normalizes all averages.
    pub n_total: usize,
    pub at: Array1<f64>,
}

impl LinearizedProblem {
    pub fn dropped(&self) -> usize {
        self.n_total - self.kept.len()
    }

    /// `(1/N) Σ w (r − γ'd)²`.
    pub fn objective(&self, gamma: ArrayView1<'_, f64>) -> f64 {
        let fit = self.design.dot(&gamma);
        let mut acc = 0.0;
        for i in 0..fit.len() {
            let e = self.response[i] - fit[i];
            acc += self.weights[i] * e * e;
        }
        acc / self.n_total as f64
    }

    /// `(1/N) Σ w (S − f̂)²` at the linearization point.
    pub fn loss_at_point(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.residual.iter())
            .map(|(w, r)| w * r * r)
            .sum::<f64>()
            / self.n_total as f64
    }

    /// `(A, b)` with `A = (1/N)Σ w d d'` and `b = (1/N)Σ w r d`.
    pub fn gram(&self) -> (Array2<f64>, Array1<f64>) {
        let rows: Vec<usize> = (0..self.kept.len()).collect();
        let (a, b, _) = self.gram_rows(&rows);
        let n = self.n_total as f64;
        (a / n, b / n)
    }

    /// Unnormalized `(Σ w d d', Σ w r d, Σ w r²)` over a subset of kept rows.
    pub fn gram_rows(&self, rows: &[usize]) -> (Array2<f64>, Array1<f64>, f64) {
        weighted_gram(self.design.view(), self.response.view(), self.weights.view(), rows)
    }
}

fn weighted_gram(
    design: ArrayView2<'_, f64>,
    response: ArrayView1<'_, f64>,
    weights: ArrayView1<'_, f64>,
    rows: &[usize],
) -> (Array2<f64>, Array1<f64>, f64) {
    let p = design.ncols();
    let m = rows.len();
    let dw = Mat::<f64>::from_fn(m, p, |r, c| {
        let i = rows[r];
        weights[i].sqrt() * design[[i, c]]
    });
    let mut out = Mat::<f64>::zeros(p, p);
    matmul(out.as_mut(), Accum::Replace, dw.transpose(), dw.as_ref(), 1.0, Par::Seq);
    crate::simd::zero_upper();
    let mut a = Array2::from_shape_fn((p, p), |(i, j)| out[(i, j)]);
    // exact symmetry
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    let mut b = Array1::<f64>::zeros(p);
    let mut c = 0.0;
    for &i in rows {
        let wr = weights[i] * response[i];
        b.scaled_add(wr, &design.row(i));
        c += wr * response[i];
    }
    (a, b, c)
}

/// Builds the linearized weighted least-squares rows at `gamma_prev`.
/// Rows with a degenerate kernel neighborhood are dropped.
pub fn one_step_linearized_problem(
    d: &Dataset,
    gamma_prev: &CoefficientVector,
    k: &KernelSpec,
    w: WeightScheme,
) -> Result<LinearizedProblem> {
    linearize_at(d, gamma_prev.values(), k, w)
}

pub(crate) fn linearize_at(
    d: &Dataset,
    gamma: ArrayView1<'_, f64>,
    k: &KernelSpec,
    w: WeightScheme,
) -> Result<LinearizedProblem> {
    if d.n_rows() < 2 {
        return Err(SashError::InvalidInput(
            "linearization needs at least two rows".into(),
        ));
    }
    let eval = evaluate_link(d.x(), d.s(), gamma, k)?;
    let n = d.n_rows();
    let p = d.p();
    let kept: Vec<usize> = (0..n).filter(|i| !eval.fhat[*i].is_nan()).collect();
    if kept.is_empty() {
        return Err(SashError::DegenerateNeighborhood {
            row: 0,
            denominator: eval.denominators[0],
        });
    }
    if !eval.degenerate.is_empty() {
        log::warn!(
            "dropped {} rows with degenerate kernel neighborhoods",
            eval.degenerate.len()
        );
    }
    let s = d.s();
    let mut design = Array2::<f64>::zeros((kept.len(), p));
    let mut response = Array1::<f64>::zeros(kept.len());
    let mut weights = Array1::<f64>::zeros(kept.len());
    let mut residual = Array1::<f64>::zeros(kept.len());
    for (r, &i) in kept.iter().enumerate() {
        let gi = eval.grad.row(i);
        design.row_mut(r).assign(&gi);
        let e = s[i] - eval.fhat[i];
        residual[r] = e;
        response[r] = e + gamma.dot(&gi);
        weights[r] = w.eval(eval.fhat[i]);
    }
    Ok(LinearizedProblem {
        design,
        response,
        weights,
        residual,
        kept,
        n_total: n,
        at: gamma.to_owned(),
    })
}

/// Per-iteration record of a local fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub lambda: f64,
    /// Penalized linearized objective at the new iterate.
    pub objective: f64,
    pub step_norm: f64,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone)]
pub struct LocalSimFit {
    pub gamma: CoefficientVector,
    pub sigma2: f64,
    pub trajectory: Vec<IterationRecord>,
    /// The linearization at `gamma`, reused for the site summary.
    pub final_problem: LinearizedProblem,
    pub schedule_clamped: bool,
}

/// Deterministic fold labels derived from row contents, so that permuting
/// rows does not change fold membership.
pub fn content_folds(x: ArrayView2<'_, f64>, s: ArrayView1<'_, f64>, folds: usize) -> Vec<usize> {
    (0..x.nrows())
        .map(|i| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for v in x.row(i).iter().chain(std::iter::once(&s[i])) {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x1000_0000_01b3);
                h ^= h >> 29;
            }
            h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            ((h >> 32) % folds as u64) as usize
        })
        .collect()
}

/// Log-spaced grid from `hi` down to `hi * ratio`.
pub fn log_grid(hi: f64, ratio: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![hi];
    }
    (0..count)
        .map(|k| hi * ratio.powf(k as f64 / (count - 1) as f64))
        .collect()
}

const CV_PATIENCE: usize = 5;

/// K-fold CV for λ on a fixed linearized problem. Held-out error of a
/// candidate is evaluated exactly from the fold's sufficient statistics.
/// Returns the selected λ; ties go to the larger value.
pub fn cv_lambda_linearized(
    lp: &LinearizedProblem,
    folds: usize,
    grid_size: usize,
    solver: &SolverOptions,
) -> Result<f64> {
    let (a_full, b_full) = lp.gram();
    let full = QuadraticProblem::unchecked(a_full, b_full, 0.0, true)?;
    let lmax = full.lambda_max();
    if lmax <= 0.0 {
        return Ok(0.0);
    }
    let grid = log_grid(lmax, 1e-3, grid_size);
    let x_rows = lp.design.view();
    let labels = content_folds(x_rows, lp.response.view(), folds);
    let all_rows: Vec<usize> = (0..lp.kept.len()).collect();
    let (a_sum, b_sum, _) = lp.gram_rows(&all_rows);
    struct Fold {
        q: QuadraticProblem,
        a_out: Array2<f64>,
        b_out: Array1<f64>,
        c_out: f64,
        n_out: f64,
        warm: Option<Array1<f64>>,
        alive: bool,
    }
    let mut fold_data = Vec::with_capacity(folds);
    for f in 0..folds {
        let rows: Vec<usize> = all_rows.iter().copied().filter(|&i| labels[i] == f).collect();
        let n_out = rows.len();
        let n_in = lp.kept.len() - n_out;
        if n_out == 0 || n_in < 2 {
            continue;
        }
        let (a_out, b_out, c_out) = lp.gram_rows(&rows);
        let a_in = (&a_sum - &a_out) / n_in as f64;
        let b_in = (&b_sum - &b_out) / n_in as f64;
        fold_data.push(Fold {
            q: QuadraticProblem::unchecked(a_in, b_in, grid[0], true)?,
            a_out,
            b_out,
            c_out,
            n_out: n_out as f64,
            warm: None,
            alive: true,
        });
    }
    if fold_data.is_empty() {
        return Ok(grid[grid.len() / 2]);
    }
    // walk the grid downward; a fold whose solve stalls scores +inf from
    // there on, and the walk ends once the error has risen for
    // CV_PATIENCE consecutive values past the running minimum
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (g, &lambda) in grid.iter().enumerate() {
        let mut err = 0.0;
        for fold in fold_data.iter_mut() {
            if !fold.alive {
                err = f64::INFINITY;
                continue;
            }
            fold.q.set_lambda(lambda);
            match solve_constrained_lasso_quadratic(&fold.q, &solver.with_warm_start(fold.warm.take())) {
                Ok(gamma) => {
                    let gv = gamma.values();
                    err += (gv.dot(&fold.a_out.dot(&gv)) - 2.0 * gv.dot(&fold.b_out) + fold.c_out)
                        / fold.n_out;
                    fold.warm = Some(gamma.into_inner());
                }
                Err(SashError::NoConvergence { .. }) => {
                    fold.alive = false;
                    err = f64::INFINITY;
                }
                Err(e) => return Err(e),
            }
        }
        if err < best_err {
            best_err = err;
            best = g;
        } else if g >= best + CV_PATIENCE || !err.is_finite() {
            break;
        }
    }
    Ok(grid[best])
}

/// A site's data with the kernel and weights used to smooth it.
#[derive(Debug, Clone, Copy)]
pub struct SiteLink<'a> {
    pub data: &'a Dataset,
    pub kernel: KernelSpec,
    pub weights: WeightScheme,
}

/// Linearizes every site at the same direction, each with its own kernel
/// smoother, and stacks the rows. Averages are taken over all sites' rows,
/// so the stacked Gram matrix is the N_m-weighted mean of the site ones.
pub fn linearize_pooled(sites: &[SiteLink<'_>], gamma: ArrayView1<'_, f64>) -> Result<LinearizedProblem> {
    if sites.len() == 1 {
        let s = &sites[0];
        return linearize_at(s.data, gamma, &s.kernel, s.weights);
    }
    let parts: Vec<LinearizedProblem> = sites
        .iter()
        .map(|s| {
            linearize_at(s.data, gamma, &s.kernel, s.weights).map_err(|e| e.at_site(s.data.site_id()))
        })
        .collect::<Result<_>>()?;
    let p = gamma.len();
    let rows: usize = parts.iter().map(|lp| lp.kept.len()).sum();
    let mut design = Array2::<f64>::zeros((rows, p));
    let mut response = Array1::<f64>::zeros(rows);
    let mut weights = Array1::<f64>::zeros(rows);
    let mut residual = Array1::<f64>::zeros(rows);
    let mut kept = Vec::with_capacity(rows);
    let (mut r, mut offset) = (0, 0);
    for lp in &parts {
        let m = lp.kept.len();
        design.slice_mut(ndarray::s![r..r + m, ..]).assign(&lp.design);
        response.slice_mut(ndarray::s![r..r + m]).assign(&lp.response);
        weights.slice_mut(ndarray::s![r..r + m]).assign(&lp.weights);
        residual.slice_mut(ndarray::s![r..r + m]).assign(&lp.residual);
        kept.extend(lp.kept.iter().map(|i| i + offset));
        r += m;
        offset += lp.n_total;
    }
    Ok(LinearizedProblem {
        design,
        response,
        weights,
        residual,
        kept,
        n_total: offset,
        at: gamma.to_owned(),
    })
}

/// Penalty for iteration `t` of a fit with `max_iter` iterations. The flag
/// reports a clamped supervised rate.
pub fn select_lambda(
    schedule: &LambdaSchedule,
    t: usize,
    max_iter: usize,
    lp: &LinearizedProblem,
    solver: &SolverOptions,
) -> Result<(f64, bool)> {
    Ok(match schedule {
        LambdaSchedule::Theoretical(r) => {
            (lambda_schedule_theoretical(t, r.t_prime(), r), r.base_rate().1)
        }
        LambdaSchedule::FixedSequence(v) => (v[(t - 1).min(v.len() - 1)], false),
        LambdaSchedule::CvPerIteration {
            folds,
            grid_size,
            shape,
        } => {
            let cv = cv_lambda_linearized(lp, *folds, *grid_size, solver)?;
            match shape {
                Some(r) => {
                    let tp = r.t_prime();
                    let scale = lambda_schedule_theoretical(t, tp, r)
                        / lambda_schedule_theoretical(max_iter, tp, r);
                    (cv * scale, r.base_rate().1)
                }
                None => (cv, false),
            }
        }
    })
}

/// Runs the iteratively linearized local fit from `gamma_init`.
///
/// Stops after `max_iter` iterations or once an update moves less than
/// `convergence_tol`, in which case the previous iterate is kept.
pub fn fit_local_sim(
    d: &Dataset,
    gamma_init: &CoefficientVector,
    cfg: &SimFitConfig,
) -> Result<LocalSimFit> {
    let site = SiteLink {
        data: d,
        kernel: cfg.kernel,
        weights: cfg.weights,
    };
    fit_pooled_sim(&[site], gamma_init, cfg)
}

/// The same iteration over several sites linearized at a shared direction;
/// `cfg.kernel` and `cfg.weights` are ignored in favor of each site's own.
pub fn fit_pooled_sim(
    sites: &[SiteLink<'_>],
    gamma_init: &CoefficientVector,
    cfg: &SimFitConfig,
) -> Result<LocalSimFit> {
    cfg.validate()?;
    if sites.is_empty() {
        return Err(SashError::Empty("no sites to fit".into()));
    }
    if let Some(s) = sites.iter().find(|s| s.data.p() != gamma_init.len()) {
        return Err(SashError::Dimension(format!(
            "initial direction has length {} but site {} has {} covariates",
            gamma_init.len(),
            s.data.site_id(),
            s.data.p()
        )));
    }
    let mut gamma = CoefficientVector::direction(gamma_init.values().to_owned())?;
    let mut trajectory = Vec::new();
    let mut lp = linearize_pooled(sites, gamma.values()).map_err(|e| e.at_iteration(1))?;
    let mut clamped = false;
    for t in 1..=cfg.max_iter {
        let (a, b) = lp.gram();
        let mut q = QuadraticProblem::new(a, b, 0.0, true).map_err(|e| e.at_iteration(t))?;
        let (lambda, c) = select_lambda(&cfg.lambda_schedule, t, cfg.max_iter, &lp, &cfg.solver)
            .map_err(|e| e.at_iteration(t))?;
        clamped |= c;
        q.set_lambda(lambda);
        let next = solve_constrained_lasso_quadratic(
            &q,
            &cfg.solver.with_warm_start(Some(gamma.values().to_owned())),
        )
        .map_err(|e| e.at_iteration(t))?;
        let step = (&next.values() - &gamma.values())
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        trajectory.push(IterationRecord {
            t,
            lambda,
            objective: q.objective(next.values()),
            step_norm: step,
            dropped_rows: lp.dropped(),
        });
        log::debug!("sim fit iteration {t}: lambda {lambda:.4e}, step {step:.4e}, nnz {}", next.nnz());
        if step <= cfg.convergence_tol && t >= cfg.lambda_schedule.settled_from() {
            break;
        }
        gamma = next;
        lp = linearize_pooled(sites, gamma.values()).map_err(|e| e.at_iteration(t + 1))?;
    }
    let sigma2 = lp.loss_at_point();
    Ok(LocalSimFit {
        gamma,
        sigma2,
        trajectory,
        final_problem: lp,
        schedule_clamped: clamped,
    })
}

/// Grid search over `(λ, h)` by K-fold CV. Each candidate is fit on the
/// training folds with a constant λ and scored by the weighted squared
/// error of full-sample kernel predictions on the held-out fold.
pub fn cv_tune_sim(
    d: &Dataset,
    gamma_init: &CoefficientVector,
    lambda_grid: &[f64],
    h_grid: &[f64],
    folds: usize,
    base: &SimFitConfig,
) -> Result<SimFitConfig> {
    if folds < 2 || lambda_grid.is_empty() || h_grid.is_empty() {
        return Err(SashError::InvalidInput(
            "cv tuning needs folds >= 2 and nonempty grids".into(),
        ));
    }
    let mut lambdas = lambda_grid.to_vec();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    lambdas.dedup();
    let mut hs = h_grid.to_vec();
    hs.sort_by(|a, b| b.total_cmp(a));
    hs.dedup();
    let labels = content_folds(d.x(), d.s(), folds);
    let splits: Vec<(Dataset, Dataset)> = (0..folds)
        .filter_map(|f| {
            let train: Vec<usize> = (0..d.n_rows()).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..d.n_rows()).filter(|&i| labels[i] == f).collect();
            if train.len() < 2 || test.is_empty() {
                return None;
            }
            let tr = d.without_labels().select_rows(&train).ok()?;
            let te = d.without_labels().select_rows(&test).ok()?;
            Some((tr, te))
        })
        .collect();
    if splits.is_empty() {
        return Err(SashError::InvalidInput("no usable CV folds".into()));
    }
    let mut failures = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    // larger λ, then larger h, visited first so strict improvement breaks ties
    for &lambda in &lambdas {
        for &h in &hs {
            let mut cfg = base.clone();
            cfg.kernel = match KernelSpec::gaussian(h) {
                Ok(k) => k,
                Err(e) => {
                    failures.push(format!("lambda {lambda:e}, h {h:e}: {e}"));
                    continue;
                }
            };
            cfg.lambda_schedule = LambdaSchedule::FixedSequence(vec![lambda]);
            let mut total = 0.0;
            let mut ok = true;
            for (tr, te) in &splits {
                let res = fit_local_sim(tr, gamma_init, &cfg).and_then(|fit| {
                    let pred = predict_link(tr.x(), tr.s(), fit.gamma.values(), &cfg.kernel, te.x())?;
                    Ok(pred
                        .iter()
                        .zip(te.s().iter())
                        .map(|(f, s)| cfg.weights.eval(*f) * (s - f).powi(2))
                        .sum::<f64>()
                        / te.n_rows() as f64)
                });
                match res {
                    Ok(e) => total += e,
                    Err(e) => {
                        failures.push(format!("lambda {lambda:e}, h {h:e}: {e}"));
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let score = total / splits.len() as f64;
            if best.is_none_or(|(b, _, _)| score < b) {
                best = Some((score, lambda, h));
            }
        }
    }
    let Some((_, lambda, h)) = best else {
        return Err(SashError::AllConfigsFailed(failures.join("\n")));
    };
    let mut cfg = base.clone();
    cfg.kernel = KernelSpec::gaussian(h)?;
    cfg.lambda_schedule = LambdaSchedule::FixedSequence(vec![lambda]);
    Ok(cfg)
}
