//! Post-hoc KKT auditing of lasso solves.
//!
//! While an audit is open, every successful lasso solve is offered to a
//! reservoir sampler; the retained problems are re-checked after the run
//! with an independent residual computation.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::solvers::{lasso_logistic_kkt_residual, LogisticFit, QuadraticProblem};

#[derive(Debug, Clone)]
pub enum AuditedSolve {
    Quadratic {
        problem: QuadraticProblem,
        solution: Array1<f64>,
        tol: f64,
    },
    Logistic {
        x: Array2<f64>,
        y: Array1<f64>,
        fit: LogisticFit,
        penalize_first: bool,
        tol: f64,
    },
}

impl AuditedSolve {
    pub fn kkt_residual(&self) -> f64 {
        match self {
            AuditedSolve::Quadratic {
                problem, solution, ..
            } => problem.kkt_residual(solution.view()),
            AuditedSolve::Logistic {
                x,
                y,
                fit,
                penalize_first,
                ..
            } => lasso_logistic_kkt_residual(x.view(), y.view(), fit, *penalize_first),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AuditedSolve::Quadratic { .. } => "quadratic",
            AuditedSolve::Logistic { .. } => "logistic",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    /// Number of solves offered to the sampler.
    pub seen: u64,
    pub samples: Vec<AuditedSolve>,
}

impl AuditReport {
    /// `(label, residual)` for each retained solve.
    pub fn residuals(&self) -> Vec<(&'static str, f64)> {
        self.samples
            .iter()
            .map(|s| (s.label(), s.kkt_residual()))
            .collect()
    }
}

struct Reservoir {
    seen: u64,
    capacity: usize,
    samples: Vec<AuditedSolve>,
    rng: ChaCha8Rng,
}

static ENABLED: AtomicBool = AtomicBool::new(false);
static STATE: Mutex<Option<Reservoir>> = Mutex::new(None);

/// Opens an audit retaining up to `capacity` uniformly sampled solves.
pub fn start(capacity: usize, seed: u64) {
    let mut st = STATE.lock().unwrap_or_else(|e| e.into_inner());
    *st = Some(Reservoir {
        seen: 0,
        capacity,
        samples: Vec::with_capacity(capacity),
        rng: ChaCha8Rng::seed_from_u64(seed),
    });
    ENABLED.store(true, Ordering::SeqCst);
}

/// Closes the audit and returns what was sampled.
pub fn finish() -> Option<AuditReport> {
    ENABLED.store(false, Ordering::SeqCst);
    let mut st = STATE.lock().unwrap_or_else(|e| e.into_inner());
    st.take().map(|r| AuditReport {
        seen: r.seen,
        samples: r.samples,
    })
}

fn offer(make: impl FnOnce() -> AuditedSolve) {
    if !ENABLED.load(Ordering::Relaxed) {
        return;
    }
    let mut st = STATE.lock().unwrap_or_else(|e| e.into_inner());
    let Some(r) = st.as_mut() else { return };
    r.seen += 1;
    if r.samples.len() < r.capacity {
        r.samples.push(make());
    } else {
        let k = r.rng.random_range(0..r.seen);
        if (k as usize) < r.capacity {
            r.samples[k as usize] = make();
        }
    }
}

pub(crate) fn record_quadratic(q: &QuadraticProblem, solution: ArrayView1<'_, f64>, tol: f64) {
    offer(|| AuditedSolve::Quadratic {
        problem: q.clone(),
        solution: solution.to_owned(),
        tol,
    });
}

pub(crate) fn record_logistic(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    fit: &LogisticFit,
    penalize_first: bool,
    tol: f64,
) {
    offer(|| AuditedSolve::Logistic {
        x: x.to_owned(),
        y: y.to_owned(),
        fit: fit.clone(),
        penalize_first,
        tol,
    });
}
