use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

use sash_core::baselines::fit_sl;
use sash_core::federation::{
    compute_xi, confidence_interval, pool, run_sash, sash_plus_round, site_fit, site_summary_at,
    step1_supervised_init, CiEntry, SashConfig, ScheduleMode, SiteSummary,
};
use sash_core::kernel::{KernelSpec, WeightScheme};
use sash_core::simfit::{
    fit_local_sim, fit_pooled_sim, linearize_pooled, one_step_linearized_problem, LambdaSchedule,
    SimFitConfig, SiteLink,
};
use sash_core::simgen::{
    gen_experiment, gen_outcome, gen_raw_counts, gen_surrogate, sub_rng, SimConfig, Stream,
    Strength, SurrogateLaw,
};
use sash_core::solvers::{solve_constrained_lasso_quadratic, QuadraticProblem};
use sash_core::{CoefficientVector, Dataset};

fn small(seed: u64) -> Vec<Dataset> {
    let mut sim = SimConfig::with_shape(Strength::Strong, 2, 80, 8, 160);
    sim.seed = seed;
    gen_experiment(&sim, 0).unwrap().sites
}

fn eight_rows() -> Dataset {
    let x = array![
        [0.7, 1.1, 0.2],
        [1.3, 0.4, 0.9],
        [0.2, 0.8, 1.5],
        [1.8, 1.6, 0.3],
        [0.9, 0.1, 0.6],
        [1.1, 1.9, 1.2],
        [0.4, 0.5, 0.1],
        [1.6, 0.7, 1.7],
    ];
    let s = array![1.0, 3.0, 0.0, 4.0, 2.0, 5.0, 0.0, 3.0];
    Dataset::new(x, s, None, 1).unwrap()
}

/// Naive leave-one-out smoother written from scratch.
fn naive_fhat(x: &Array2<f64>, s: &Array1<f64>, gamma: &[f64], h: f64, i: usize) -> f64 {
    let u: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(gamma).map(|(a, b)| a * b).sum())
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..u.len() {
        if j != i {
            let v = (u[j] - u[i]) / h;
            let k = (-0.5 * v * v).exp();
            num += k * s[j];
            den += k;
        }
    }
    num / den
}

#[test]
fn linearized_rows_match_a_naive_oracle() {
    let d = eight_rows();
    let gamma = [1.0, -0.4, 0.7];
    let h = 0.6;
    let w = WeightScheme::PoissonInverseMean;
    let lp = one_step_linearized_problem(
        &d,
        &CoefficientVector::direction(Array1::from(gamma.to_vec())).unwrap(),
        &KernelSpec::gaussian(h).unwrap(),
        w,
    )
    .unwrap();
    let x = d.x().to_owned();
    let s = d.s().to_owned();
    assert_eq!(lp.kept.len(), 8);
    for i in 0..8 {
        let f = naive_fhat(&x, &s, &gamma, h, i);
        let mut grad = [0.0; 3];
        for (c, g) in grad.iter_mut().enumerate() {
            let eps = 1e-6;
            let (mut up, mut dn) = (gamma, gamma);
            up[c] += eps;
            dn[c] -= eps;
            *g = (naive_fhat(&x, &s, &up, h, i) - naive_fhat(&x, &s, &dn, h, i)) / (2.0 * eps);
        }
        for (c, g) in grad.iter().enumerate() {
            assert!((lp.design[[i, c]] - g).abs() < 1e-7, "row {i} col {c}");
        }
        let gd: f64 = grad.iter().zip(&gamma).map(|(a, b)| a * b).sum();
        assert!((lp.residual[i] - (s[i] - f)).abs() < 1e-12);
        assert!((lp.response[i] - (s[i] - f + gd)).abs() < 1e-7);
        assert!((lp.weights[i] - 1.0 / f).abs() < 1e-12);
    }
}

#[test]
fn constant_surrogate_gives_a_flat_summary() {
    let d = eight_rows();
    let (x, _, _) = d.into_parts();
    let d = Dataset::new(x, Array1::from_elem(8, 2.0), None, 4).unwrap();
    let g = CoefficientVector::direction(array![1.0, 0.3, -0.2]).unwrap();
    let s = site_summary_at(
        &d,
        &g,
        &KernelSpec::gaussian(0.5).unwrap(),
        WeightScheme::PoissonInverseMean,
    )
    .unwrap();
    assert!(s.omega_xx.iter().all(|v| v.abs() < 1e-12));
    assert!(s.omega_xs.iter().all(|v| v.abs() < 1e-12));
    assert!(s.sigma2.abs() < 1e-24);
    assert_eq!(s.n_m, 8);
}

#[test]
fn summary_splits_into_score_and_curvature() {
    let d = &small(3)[1];
    let g = CoefficientVector::direction(array![1.0, -0.8, 0.4, -0.5, 0.2, 0.0, 0.1, 0.0]).unwrap();
    let k = KernelSpec::gaussian(0.5).unwrap();
    let w = WeightScheme::infer(d.s());
    let lp = one_step_linearized_problem(d, &g, &k, w).unwrap();
    let s = site_summary_at(d, &g, &k, w).unwrap();
    let xi = compute_xi(&lp);
    let rebuilt = -&xi + &s.omega_xx.dot(&g.values());
    let scale = s.omega_xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in rebuilt.iter().zip(s.omega_xs.iter()) {
        assert!((a - b).abs() <= 1e-12 * scale.max(1.0));
    }
}

#[test]
fn huge_penalty_pins_the_anchor_direction() {
    let d = &small(4)[0];
    let mut cfg = SimFitConfig::for_site(d.n_rows(), WeightScheme::infer(d.s())).unwrap();
    cfg.lambda_schedule = LambdaSchedule::FixedSequence(vec![1e6]);
    cfg.max_iter = 3;
    let init =
        CoefficientVector::direction(array![1.0, -0.5, 0.3, 0.0, 0.0, 0.2, 0.0, 0.0]).unwrap();
    let fit = fit_local_sim(d, &init, &cfg).unwrap();
    assert_eq!(fit.gamma.values(), CoefficientVector::e1(8).values());
}

#[test]
fn each_step_lowers_the_penalized_objective() {
    let d = &small(5)[0];
    let k = KernelSpec::gaussian(0.5).unwrap();
    let w = WeightScheme::infer(d.s());
    let mut g =
        CoefficientVector::direction(array![1.0, -0.9, 0.6, -0.4, 0.3, -0.2, 0.1, -0.1]).unwrap();
    for _ in 0..3 {
        let lp = one_step_linearized_problem(d, &g, &k, w).unwrap();
        let (a, b) = lp.gram();
        let q = QuadraticProblem::new(a, b, 0.01, true).unwrap();
        let opts = sash_core::solvers::SolverOptions::default()
            .with_warm_start(Some(g.values().to_owned()));
        let next = solve_constrained_lasso_quadratic(&q, &opts).unwrap();
        assert!(q.objective(next.values()) <= q.objective(g.values()) + 1e-12);
        assert!(q.kkt_residual(next.values()) < 1e-6);
        g = next;
    }
}

#[test]
fn row_order_does_not_change_the_local_fit() {
    let d = &small(6)[1];
    let opts = sash_core::federation::SiteFitOptions {
        schedule: ScheduleMode::Theoretical,
        ..Default::default()
    };
    let init =
        CoefficientVector::direction(array![1.0, -0.9, 0.6, -0.4, 0.3, -0.2, 0.1, -0.1]).unwrap();
    let mut rows: Vec<usize> = (0..d.n_rows()).collect();
    rows.reverse();
    rows.swap(3, 40);
    let shuffled = d.select_rows(&rows).unwrap();
    let (a, sa) = site_fit(d, &init, 80, &opts).unwrap();
    let (b, sb) = site_fit(&shuffled, &init, 80, &opts).unwrap();
    for (u, v) in a.gamma.values().iter().zip(b.gamma.values().iter()) {
        assert!((u - v).abs() < 1e-9);
    }
    for (u, v) in sa.omega_xx.iter().zip(sb.omega_xx.iter()) {
        assert!((u - v).abs() < 1e-10);
    }
}

#[test]
fn single_site_pooling_is_the_local_fit() {
    let d = &small(7)[0];
    let cfg = SashConfig::default().site.config_for(d, 4, 80).unwrap();
    let init =
        CoefficientVector::direction(array![1.0, -0.9, 0.6, -0.4, 0.3, -0.2, 0.1, -0.1]).unwrap();
    let link = SiteLink {
        data: d,
        kernel: cfg.kernel,
        weights: cfg.weights,
    };
    let pooled = fit_pooled_sim(&[link], &init, &cfg).unwrap();
    let local = fit_local_sim(d, &init, &cfg).unwrap();
    assert_eq!(pooled.gamma, local.gamma);
    assert_eq!(pooled.trajectory, local.trajectory);
}

#[test]
fn stacked_gram_is_the_row_weighted_mean() {
    let sites = small(8);
    let g =
        CoefficientVector::direction(array![1.0, -0.9, 0.6, -0.4, 0.3, -0.2, 0.1, -0.1]).unwrap();
    let links: Vec<SiteLink<'_>> = sites
        .iter()
        .map(|d| SiteLink {
            data: d,
            kernel: KernelSpec::gaussian(0.5).unwrap(),
            weights: WeightScheme::infer(d.s()),
        })
        .collect();
    let lp = linearize_pooled(&links, g.values()).unwrap();
    let (a, b) = lp.gram();
    let summaries: Vec<SiteSummary> = links
        .iter()
        .map(|l| site_summary_at(l.data, &g, &l.kernel, l.weights).unwrap())
        .collect();
    let p = pool(&summaries).unwrap();
    assert_eq!(p.n_total, 320);
    for (u, v) in a.iter().zip(p.a.iter()) {
        assert!((u - v).abs() < 1e-12);
    }
    for (u, v) in b.iter().zip(p.b.iter()) {
        assert!((u - v).abs() < 1e-12);
    }
}

fn summary(site: usize, n_m: usize, seed: f64) -> SiteSummary {
    let a = array![[2.0 + seed, 0.3], [0.3, 1.0 + seed * seed]];
    SiteSummary {
        site_id: site,
        n_m,
        omega_xx: a,
        omega_xs: array![seed, 1.0 - seed],
        sigma2: 0.5 + seed,
        gamma_local: None,
    }
}

proptest! {
    #[test]
    fn pooling_ignores_arrival_order_and_common_size_scaling(
        seeds in proptest::collection::vec(0.0f64..2.0, 2..6),
        sizes in proptest::collection::vec(1usize..500, 6),
        scale in 1usize..7,
        rot in 0usize..6,
    ) {
        let list: Vec<SiteSummary> = seeds.iter().enumerate().map(|(i, &s)| summary(i + 1, sizes[i], s)).collect();
        let base = pool(&list).unwrap();
        let mut turned = list.clone();
        turned.rotate_left(rot % list.len());
        let rotated = pool(&turned).unwrap();
        prop_assert_eq!(&base.a, &rotated.a);
        prop_assert_eq!(&base.b, &rotated.b);
        let scaled: Vec<SiteSummary> = list.iter().cloned().map(|mut s| { s.n_m *= scale; s }).collect();
        let scaled = pool(&scaled).unwrap();
        for (u, v) in base.a.iter().zip(scaled.a.iter()) {
            prop_assert!((u - v).abs() < 1e-13);
        }
        prop_assert!((base.sigma2 - scaled.sigma2).abs() < 1e-13);
    }
}

#[test]
fn one_site_pools_to_itself() {
    let s = summary(3, 77, 0.7);
    let p = pool(std::slice::from_ref(&s)).unwrap();
    for (u, v) in p.a.iter().zip(s.omega_xx.iter()) {
        assert!((u - v).abs() <= 1e-15 * v.abs());
    }
    assert_eq!(p.sites, vec![3]);
    assert_eq!(p.n_total, 77);
}

#[test]
fn supervised_baseline_is_the_initial_fit() {
    let sites = small(9);
    let cfg = SashConfig::default();
    let s1 = step1_supervised_init(&sites[0], &cfg.step1).unwrap();
    let sl = fit_sl(&sites[0], &cfg.step1).unwrap();
    let bits = |v: ndarray::ArrayView1<'_, f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(sl.beta.values()), bits(s1.beta_sup.view()));
}

#[test]
fn extra_round_summarizes_at_the_broadcast_direction() {
    let sites = small(10);
    let cfg = SashConfig::default();
    let run = run_sash(&sites, &cfg).unwrap();
    let g = &run.step3.gamma_hat;
    let out = sash_plus_round(g, &sites, &cfg.site, false).unwrap();
    assert_eq!(out.len(), 2);
    for s in &out {
        assert_eq!(s.gamma_local.as_ref(), Some(g));
    }
    // summarizing twice at the same direction changes nothing
    let again = sash_plus_round(g, &sites, &cfg.site, false).unwrap();
    assert_eq!(out, again);
}

#[test]
fn interval_is_centered_and_widens_with_confidence() {
    let sites = small(11);
    let cfg = SashConfig::default();
    let run = run_sash(&sites, &cfg).unwrap();
    let fit = &run.step3.fit;
    let x = sites[0].x().row(0).to_owned();
    let center = fit.beta1 * x.dot(&fit.gamma_dagger.values());
    let ci95 = confidence_interval(&sites[0], fit, x.view(), 0.05, CiEntry::Slope).unwrap();
    let ci80 = confidence_interval(&sites[0], fit, x.view(), 0.2, CiEntry::Slope).unwrap();
    assert!((0.5 * (ci95.lower + ci95.upper) - center).abs() < 1e-12);
    assert!(ci95.upper - ci95.lower > ci80.upper - ci80.lower);
    assert_eq!(ci95.level, 0.95);
    // half-width ratio is the ratio of normal quantiles
    let r = (ci95.upper - ci95.lower) / (ci80.upper - ci80.lower);
    assert!((r - 1.959963984540054 / 1.2815515655446004).abs() < 1e-12);
    assert!(confidence_interval(&sites[0], fit, x.view(), 1.5, CiEntry::Slope).is_err());
}

#[test]
fn count_covariates_have_the_designed_moments() {
    let mut cfg = SimConfig::with_shape(Strength::Weak, 2, 50, 8, 100);
    cfg.p = 4;
    let rows = 40_000;
    let x = gen_raw_counts(&cfg, rows, &mut sub_rng(1, 0, 1, Stream::Covariates));
    let n = rows as f64;
    let mean: Vec<f64> = (0..4).map(|j| x.column(j).sum() / n).collect();
    for (j, m) in mean.iter().enumerate() {
        let var = x.column(j).mapv(|v| (v - m) * (v - m)).sum() / n;
        // sum of two Poissons: mean and variance both equal the covariate mean
        assert!((m - 5.0).abs() < 0.05, "mean {m}");
        assert!((var - 5.0).abs() < 0.2, "variance {var}");
    }
    let cov = x
        .column(0)
        .iter()
        .zip(x.column(1).iter())
        .map(|(a, b)| (a - mean[0]) * (b - mean[1]))
        .sum::<f64>()
        / n;
    assert!((cov / 5.0 - 0.25).abs() < 0.03, "correlation {}", cov / 5.0);
}

#[test]
fn surrogates_follow_their_conditional_laws() {
    let y = Array1::from_iter((0..40_000).map(|i| (i % 3 == 0) as u8 as f64));
    let mut rng = sub_rng(2, 0, 1, Stream::Surrogate);
    let s = gen_surrogate(
        y.view(),
        &SurrogateLaw::Poisson { mu1: 3.0, mu0: 1.0 },
        &mut rng,
    );
    let mean_given = |label: f64| {
        let v: Vec<f64> = y
            .iter()
            .zip(s.iter())
            .filter(|(a, _)| **a == label)
            .map(|(_, b)| *b)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!((mean_given(1.0) - 3.0).abs() < 0.06);
    assert!((mean_given(0.0) - 1.0).abs() < 0.03);
    let b = gen_surrogate(
        y.view(),
        &SurrogateLaw::Bernoulli {
            nu1: 0.85,
            nu0: 0.15,
        },
        &mut rng,
    );
    let hits = y
        .iter()
        .zip(b.iter())
        .filter(|(a, s)| **a == 1.0 && **s == 1.0)
        .count() as f64;
    let ones = y.iter().filter(|a| **a == 1.0).count() as f64;
    assert!((hits / ones - 0.85).abs() < 0.015);
}

#[test]
fn outcomes_follow_the_logistic_model() {
    let x = Array2::from_shape_fn((40_000, 1), |(i, _)| if i % 2 == 0 { 1.0 } else { -0.5 });
    let y = gen_outcome(
        x.view(),
        array![1.2].view(),
        &mut sub_rng(3, 0, 1, Stream::Outcome),
    );
    let rate = |parity: usize| {
        let v: Vec<f64> = y
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == parity)
            .map(|(_, v)| *v)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!((rate(0) - 1.0 / (1.0 + (-1.2f64).exp())).abs() < 0.015);
    assert!((rate(1) - 1.0 / (1.0 + 0.6f64.exp())).abs() < 0.015);
}
