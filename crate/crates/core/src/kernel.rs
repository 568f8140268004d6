//! Kernel smoothing of the surrogate along a single index.
//!
//! For a direction `gamma`, the leave-one-out Nadaraya–Watson estimate at row
//! `i` is
//!
//! ```text
//! f(X_i; gamma) = sum_{j != i} K_h(u_j - u_i) S_j / sum_{j != i} K_h(u_j - u_i),   u = X gamma
//! ```
//!
//! and its derivative in `gamma` follows from the quotient rule with
//! `d/dgamma K_h(u_j - u_i) = K_h'(u_j - u_i) (X_j - X_i)`.
//!
//! The batched evaluator in [`evaluate_link`] forms the kernel-derivative
//! weights one row block at a time and reduces them against `[S*X | X | S | 1]`
//! with a single matrix product, which is where nearly all of the pipeline's
//! time goes (`O(N^2 p)` per pass).

use std::f64::consts::PI;

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CoefficientVector, Dataset};
use crate::error::{Result, SashError};

/// Clamp applied to the fitted mean (or variance) inside the weights.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Smallest admissible leave-one-out kernel mass for `n` rows.
pub fn denominator_floor(n: usize) -> f64 {
    1e-12 * n as f64
}

const ROW_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Gaussian,
}

/// Kernel family and bandwidth. `K_h(u) = K(u/h)/h`, `K_h'(u) = K'(u/h)/h^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SashError::InvalidInput(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            family: KernelFamily::Gaussian,
            bandwidth,
        })
    }

    /// `(K_h(u), K_h'(u))`.
    pub fn eval(&self, u: f64) -> (f64, f64) {
        let h = self.bandwidth;
        let v = u / h;
        match self.family {
            KernelFamily::Gaussian => {
                let k = (-0.5 * v * v).exp() / (2.0 * PI).sqrt();
                (k / h, -v * k / (h * h))
            }
        }
    }
}

/// Working variance model used to weight squared residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightScheme {
    /// `1 / f` for count surrogates.
    PoissonInverseMean,
    /// `1 / (f (1 - f))` for binary surrogates.
    BernoulliVariance,
    /// Constant weight for continuous surrogates.
    UnitWeight,
}

impl WeightScheme {
    pub fn eval(&self, fhat: f64) -> f64 {
        match self {
            WeightScheme::PoissonInverseMean => 1.0 / fhat.max(WEIGHT_FLOOR),
            WeightScheme::BernoulliVariance => 1.0 / (fhat * (1.0 - fhat)).max(WEIGHT_FLOOR),
            WeightScheme::UnitWeight => 1.0,
        }
    }

    /// Picks a scheme from the surrogate's support: binary values get the
    /// Bernoulli weights, non-negative integers the Poisson weights, anything
    /// else unit weights.
    pub fn infer(s: ArrayView1<'_, f64>) -> Self {
        if s.iter().all(|&v| v == 0.0 || v == 1.0) {
            WeightScheme::BernoulliVariance
        } else if s.iter().all(|&v| v >= 0.0 && v.fract() == 0.0) {
            WeightScheme::PoissonInverseMean
        } else {
            WeightScheme::UnitWeight
        }
    }
}

fn check_row(d: &Dataset, gamma: &CoefficientVector, i: usize) -> Result<()> {
    if d.n_rows() < 2 {
        return Err(SashError::InvalidInput(
            "kernel smoothing needs at least two rows".into(),
        ));
    }
    if gamma.len() != d.p() {
        return Err(SashError::Dimension(format!(
            "direction has length {} but data has {} covariates",
            gamma.len(),
            d.p()
        )));
    }
    if i >= d.n_rows() {
        return Err(SashError::InvalidInput(format!("row {i} out of range")));
    }
    Ok(())
}

/// Leave-one-out link estimate at row `i`.
pub fn loo_link_estimate(
    d: &Dataset,
    gamma: &CoefficientVector,
    k: &KernelSpec,
    i: usize,
) -> Result<f64> {
    check_row(d, gamma, i)?;
    let u = d.x().dot(&gamma.values());
    let s = d.s();
    let (mut num, mut den) = (0.0, 0.0);
    for j in (0..d.n_rows()).filter(|&j| j != i) {
        let (kh, _) = k.eval(u[j] - u[i]);
        num += kh * s[j];
        den += kh;
    }
    if den < denominator_floor(d.n_rows()) {
        return Err(SashError::DegenerateNeighborhood {
            row: i,
            denominator: den,
        });
    }
    Ok(num / den)
}

/// Gradient in `gamma` of the leave-one-out link estimate at row `i`,
/// evaluated as the two quotient-rule terms.
pub fn loo_link_gradient(
    d: &Dataset,
    gamma: &CoefficientVector,
    k: &KernelSpec,
    i: usize,
) -> Result<Array1<f64>> {
    check_row(d, gamma, i)?;
    let x = d.x();
    let s = d.s();
    let p = d.p();
    let u = x.dot(&gamma.values());
    let xi = x.row(i);
    let mut den = 0.0;
    let mut num = 0.0;
    let mut weighted_s_diff = Array1::<f64>::zeros(p);
    let mut weighted_diff = Array1::<f64>::zeros(p);
    for j in (0..d.n_rows()).filter(|&j| j != i) {
        let (kh, dkh) = k.eval(u[j] - u[i]);
        den += kh;
        num += kh * s[j];
        for c in 0..p {
            let diff = x[[j, c]] - xi[c];
            weighted_s_diff[c] += dkh * s[j] * diff;
            weighted_diff[c] += dkh * diff;
        }
    }
    if den < denominator_floor(d.n_rows()) {
        return Err(SashError::DegenerateNeighborhood {
            row: i,
            denominator: den,
        });
    }
    let first = weighted_s_diff / den;
    let second = weighted_diff * (num / (den * den));
    Ok(first - second)
}

/// Link estimates and gradients for every row of a dataset at one direction.
#[derive(Debug, Clone)]
pub struct LinkEvaluation {
    /// Leave-one-out estimates; `NaN` on degenerate rows.
    pub fhat: Array1<f64>,
    /// Row `i` holds the gradient at `X_i`; zero on degenerate rows.
    pub grad: Array2<f64>,
    pub denominators: Array1<f64>,
    /// Rows whose kernel mass fell below [`denominator_floor`].
    pub degenerate: Vec<usize>,
}

/// Evaluates the leave-one-out link estimate and its gradient at all rows.
pub fn evaluate_link(
    x: ArrayView2<'_, f64>,
    s: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    k: &KernelSpec,
) -> Result<LinkEvaluation> {
    let (n, p) = x.dim();
    if n < 2 {
        return Err(SashError::InvalidInput(
            "kernel smoothing needs at least two rows".into(),
        ));
    }
    if gamma.len() != p || s.len() != n {
        return Err(SashError::Dimension(format!(
            "link evaluation with x {n}x{p}, s {}, gamma {}",
            s.len(),
            gamma.len()
        )));
    }
    let u = x.dot(&gamma);
    let width = 2 * p + 2;
    // Column-major [S*X | X | S | 1].
    let mut z = vec![0.0; n * width];
    for c in 0..p {
        let col = x.column(c);
        for j in 0..n {
            z[c * n + j] = s[j] * col[j];
            z[(p + c) * n + j] = col[j];
        }
    }
    for j in 0..n {
        z[2 * p * n + j] = s[j];
        z[(2 * p + 1) * n + j] = 1.0;
    }
    let z_ref = MatRef::from_column_major_slice(&z, n, width);

    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(ROW_BLOCK)
        .map(|start| (start, (start + ROW_BLOCK).min(n)))
        .collect();
    let h = k.bandwidth;
    let norm = 1.0 / (2.0 * PI).sqrt();
    let per_block: Vec<BlockOut> = blocks
        .par_iter()
        .map(|&(start, end)| {
            let b = end - start;
            // Column r of `kt` holds K_h'(u_j - u_i) over j for row i = start + r.
            let mut kt = vec![0.0; n * b];
            let mut den = vec![0.0; b];
            let mut num = vec![0.0; b];
            for r in 0..b {
                let i = start + r;
                let ui = u[i];
                let col = &mut kt[r * n..(r + 1) * n];
                let (mut dsum, mut nsum) = (0.0, 0.0);
                for j in 0..n {
                    let v = (u[j] - ui) / h;
                    let e = norm * (-0.5 * v * v).exp();
                    col[j] = -v * e / (h * h);
                    if j != i {
                        let kh = e / h;
                        dsum += kh;
                        nsum += kh * s[j];
                    }
                }
                den[r] = dsum;
                num[r] = nsum;
            }
            let mut out = vec![0.0; b * width];
            let kt_ref = MatRef::from_column_major_slice(&kt, n, b);
            let out_mut = MatMut::from_column_major_slice_mut(&mut out, b, width);
            matmul(
                out_mut,
                Accum::Replace,
                kt_ref.transpose(),
                z_ref,
                1.0,
                Par::Seq,
            );
            crate::simd::zero_upper();
            BlockOut {
                start,
                rows: b,
                den,
                num,
                sums: out,
            }
        })
        .collect();

    let floor = denominator_floor(n);
    let mut fhat = Array1::<f64>::zeros(n);
    let mut grad = Array2::<f64>::zeros((n, p));
    let mut denominators = Array1::<f64>::zeros(n);
    let mut degenerate = Vec::new();
    for block in per_block {
        let b = block.rows;
        let at = |r: usize, c: usize| block.sums[c * b + r];
        for r in 0..b {
            let i = block.start + r;
            let den = block.den[r];
            denominators[i] = den;
            if den < floor {
                fhat[i] = f64::NAN;
                degenerate.push(i);
                continue;
            }
            let f = block.num[r] / den;
            fhat[i] = f;
            let a = at(r, 2 * p);
            let c0 = at(r, 2 * p + 1);
            let shift = a - f * c0;
            let xi = x.row(i);
            let mut g = grad.row_mut(i);
            for c in 0..p {
                g[c] = (at(r, c) - f * at(r, p + c) - xi[c] * shift) / den;
            }
        }
    }
    Ok(LinkEvaluation {
        fhat,
        grad,
        denominators,
        degenerate,
    })
}

struct BlockOut {
    start: usize,
    rows: usize,
    den: Vec<f64>,
    num: Vec<f64>,
    sums: Vec<f64>,
}

/// Full-sample kernel prediction at new points (no leave-one-out).
pub fn predict_link(
    x_train: ArrayView2<'_, f64>,
    s_train: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    k: &KernelSpec,
    x_new: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    if x_train.ncols() != gamma.len() || x_new.ncols() != gamma.len() {
        return Err(SashError::Dimension(
            "prediction covariates do not match the direction".into(),
        ));
    }
    let u_train = x_train.dot(&gamma);
    let u_new = x_new.dot(&gamma);
    let floor = denominator_floor(x_train.nrows());
    let preds: Vec<Result<f64>> = (0..u_new.len())
        .into_par_iter()
        .map(|i| {
            let ui = u_new[i];
            let (mut num, mut den) = (0.0, 0.0);
            for (uj, sj) in u_train.iter().zip(s_train.iter()) {
                let (kh, _) = k.eval(uj - ui);
                num += kh * sj;
                den += kh;
            }
            if den < floor {
                Err(SashError::DegenerateNeighborhood {
                    row: i,
                    denominator: den,
                })
            } else {
                Ok(num / den)
            }
        })
        .collect();
    preds.into_iter().collect()
}
