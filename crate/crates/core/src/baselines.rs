//! Reference estimators: supervised-only and pooled individual data.

use serde::{Deserialize, Serialize};

use crate::data::{CoefficientVector, Dataset, Diagnostics};
use crate::error::{Result, SashError};
use crate::experiment::Method;
use crate::federation::{
    bic1_grid, bic2_grid, bic_select, refit_scale, step1_supervised_init, BicMode, PooledSummary,
    RefineObjective, SashConfig, Step1Config, Step1Fit,
};
use crate::simfit::{fit_pooled_sim, linearize_pooled, LinearizedProblem, SiteLink};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: Method,
    pub beta: CoefficientVector,
    /// Final direction (IPD only).
    pub gamma: Option<CoefficientVector>,
    pub diagnostics: Diagnostics,
}

/// Penalized logistic regression on the labeled rows alone.
pub fn fit_sl(labeled: &Dataset, cfg: &Step1Config) -> Result<BaselineResult> {
    let s1 = step1_supervised_init(labeled, cfg)?;
    Ok(sl_from_step1(&s1))
}

/// The supervised estimate reused from an existing initialization.
pub fn sl_from_step1(s1: &Step1Fit) -> BaselineResult {
    let mut diagnostics = Diagnostics::new();
    diagnostics.insert("lambda".into(), s1.lambda.into());
    diagnostics.insert("alpha".into(), s1.alpha.into());
    BaselineResult {
        method: Method::Sl,
        beta: CoefficientVector::beta(s1.beta_sup.clone()).expect("finite supervised fit"),
        gamma: None,
        diagnostics,
    }
}

fn pooled_from(lp: &LinearizedProblem) -> PooledSummary {
    let (a, b) = lp.gram();
    PooledSummary {
        a,
        b,
        n_total: lp.n_total,
        sigma2: lp.loss_at_point(),
        sites: Vec::new(),
    }
}

/// Pools every site's individual rows: the linearized iterations share one
/// direction across sites (each site keeps its own kernel smoother), an
/// extra pooled step tuned by BIC1 gives the direction, and the final
/// direction mixes the pooled linearization at it with the labeled
/// likelihood, tuned by BIC2. `sites[0]` carries the labels.
pub fn fit_ipd(sites: &[Dataset], cfg: &SashConfig) -> Result<BaselineResult> {
    let labeled = sites.first().ok_or(SashError::Empty("no sites".into()))?;
    let s1 = step1_supervised_init(labeled, &cfg.step1)?;
    fit_ipd_from(sites, &s1, cfg)
}

pub fn fit_ipd_from(sites: &[Dataset], s1: &Step1Fit, cfg: &SashConfig) -> Result<BaselineResult> {
    let labeled = sites.first().ok_or(SashError::Empty("no sites".into()))?;
    let links: Vec<SiteLink<'_>> = sites
        .iter()
        .map(|d| {
            Ok(SiteLink {
                data: d,
                kernel: cfg.site.kernel_for(d)?,
                weights: cfg.site.weights_for(d),
            })
        })
        .collect::<Result<_>>()?;
    // iteration count and schedule rates follow the pooled sample
    let n_total: usize = sites.iter().map(|d| d.n_rows()).sum();
    let first = links[0];
    let sim_cfg = cfg.site.config_for_rows(
        n_total,
        labeled.p(),
        first.kernel,
        first.weights,
        s1.gamma_sup.nnz(),
        labeled.n_labeled(),
    );
    let step2 = fit_pooled_sim(&links, &s1.gamma_sup, &sim_cfg)?;
    let solver = &cfg.site.solver;

    let pooled_t = pooled_from(&step2.final_problem);
    let grid1 = bic1_grid(&pooled_t, cfg.bic_grid)?;
    let sel1 = bic_select(&pooled_t, BicMode::Bic1, &grid1, solver)?;
    let gamma_ipd = sel1.gamma;
    let (alpha, beta1) = refit_scale(labeled, &gamma_ipd)?;

    let lp = linearize_pooled(&links, gamma_ipd.values())?;
    let pooled = pooled_from(&lp);
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
    let beta = sel2.gamma.values().mapv(|g| beta1 * g);
    let mut diagnostics = Diagnostics::new();
    diagnostics.insert("alpha".into(), alpha.into());
    diagnostics.insert("beta1".into(), beta1.into());
    diagnostics.insert("lambda_ipd".into(), sel1.lambda.into());
    diagnostics.insert("lambda_dagger_ipd".into(), sel2.lambda.into());
    diagnostics.insert("iterations".into(), step2.trajectory.len().into());
    diagnostics.insert(
        "gamma_ipd".into(),
        serde_json::to_value(gamma_ipd.values().to_vec())?,
    );
    Ok(BaselineResult {
        method: Method::Ipd,
        beta: CoefficientVector::beta(beta)?,
        gamma: Some(sel2.gamma),
        diagnostics,
    })
}
