//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The Monte Carlo criteria (1-4, 8) are scored from the experiment outputs
//! under `results/`, produced by `sash experiment --config configs/<name>.json
//! --out-dir results/<name>`. A missing output, or `SASH_ACCEPTANCE_RERUN=1`,
//! reruns that experiment here (hours on one core);
//! `SASH_ACCEPTANCE_NO_RERUN=1` reports a missing output as a failure
//! instead. Records must come from
//! the pinned configuration: the stored `config.json` must equal the one in
//! `configs/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use sash_core::audit;
use sash_core::baselines::fit_ipd;
use sash_core::experiment::{run_experiment, ExperimentConfig};
use sash_core::federation::{pool, run_sash, run_sash_plus, site_summary_at};
use sash_core::kernel::{evaluate_link, loo_link_gradient, KernelSpec, WeightScheme};
use sash_core::metrics::long_format;
use sash_core::simfit::one_step_linearized_problem;
use sash_core::simgen::{gen_experiment, SimConfig, Strength};
use sash_core::{CoefficientVector, Dataset, FitResult};
use sash_transport::codec::{decode, payload_len, Kind};
use sash_transport::{coordinate, CoordinatorConfig, InProcess, SiteWorker};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ------------------------------------------------------------ experiment data

/// `(setting/method) -> per-replication values` for one metric.
type Series = BTreeMap<String, Vec<f64>>;

struct Recorded {
    beta_l2: Series,
    gamma_l2: Series,
    /// `(replication, lower, upper)` rows of the interval file.
    intervals: Vec<(usize, f64, f64)>,
    source: String,
}

fn parse_records(text: &str) -> (Series, Series) {
    let (mut b, mut g) = (Series::new(), Series::new());
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let v: f64 = f[3].parse().unwrap_or(f64::NAN);
        match f[2] {
            "beta_l2" => b.entry(f[0].to_string()).or_default().push(v),
            "gamma_l2" => g.entry(f[0].to_string()).or_default().push(v),
            _ => {}
        }
    }
    (b, g)
}

fn parse_intervals(text: &str) -> Vec<(usize, f64, f64)> {
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some((f[1].parse().ok()?, f[2].parse().ok()?, f[3].parse().ok()?))
        })
        .collect()
}

fn load_config(name: &str) -> (ExperimentConfig, String) {
    let text = fs::read_to_string(root().join("configs").join(format!("{name}.json"))).unwrap();
    (serde_json::from_str(&text).unwrap(), text)
}

fn rerun(name: &str, cfg: &ExperimentConfig, cfg_text: &str, dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let mut records = Vec::new();
    let mut intervals = String::from("setting,replication,lower,upper,level,covers\n");
    let beta01 = cfg.sim.beta0[0];
    run_experiment(cfg, cfg.sim.replications, |o| {
        records.extend(o.records.iter().cloned());
        if let Some(ci) = &o.interval {
            let rep = o.records[0].replication;
            let covers = ci.lower <= beta01 && beta01 <= ci.upper;
            let _ = writeln!(intervals, "{},{rep},{},{},{},{covers}", cfg.setting, ci.lower, ci.upper, ci.level);
        }
        eprintln!("{name}: replication {} done", o.records[0].replication);
    })
    .unwrap();
    fs::write(dir.join("records.csv"), long_format(&records)).unwrap();
    fs::write(dir.join("intervals.csv"), intervals).unwrap();
    fs::write(dir.join("config.json"), cfg_text).unwrap();
}

fn recorded(name: &str) -> Result<Recorded, String> {
    let (cfg, cfg_text) = load_config(name);
    let dir = root().join("results").join(name);
    let flag = |k: &str| std::env::var(k).is_ok_and(|v| v == "1");
    let missing = !dir.join("config.json").exists();
    if flag("SASH_ACCEPTANCE_RERUN") || (missing && !flag("SASH_ACCEPTANCE_NO_RERUN")) {
        rerun(name, &cfg, &cfg_text, &dir);
    }
    let stored: ExperimentConfig = fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .ok_or(format!("results/{name}/config.json is missing"))?;
    if stored != cfg {
        return Err(format!("results/{name} were produced with a different configuration"));
    }
    let (beta_l2, gamma_l2) = parse_records(&fs::read_to_string(dir.join("records.csv")).unwrap());
    let intervals = fs::read_to_string(dir.join("intervals.csv"))
        .map(|t| parse_intervals(&t))
        .unwrap_or_default();
    Ok(Recorded {
        beta_l2,
        gamma_l2,
        intervals,
        source: format!("results/{name}"),
    })
}

/// Mean over replications; `Err` if any replication failed or the count is off.
fn mean_of(series: &Series, key: &str, reps: usize) -> Result<f64, String> {
    let v = series.get(key).ok_or(format!("no records for {key}"))?;
    if v.len() != reps {
        return Err(format!("{key}: {} of {reps} replications recorded", v.len()));
    }
    let failed = v.iter().filter(|x| !x.is_finite()).count();
    if failed > 0 {
        return Err(format!("{key}: {failed} failed replications"));
    }
    Ok(v.iter().sum::<f64>() / reps as f64)
}

const REPS: usize = 20;
const TOL_TABLE: f64 = 0.20;
const TARGETS: [(&str, &str, f64); 6] = [
    ("weak", "IPD", 0.735),
    ("weak", "SASH", 0.949),
    ("weak", "SL", 1.834),
    ("strong", "IPD", 0.600),
    ("strong", "SASH", 0.661),
    ("strong", "SL", 1.834),
];

fn table_criteria() -> Vec<Outcome> {
    let weak = recorded("paper_weak");
    let strong = recorded("paper_strong");
    let series = |s: &str| match s {
        "weak" => weak.as_ref(),
        _ => strong.as_ref(),
    };
    let mean = |s: &str, m: &str| -> Result<f64, String> {
        let r = series(s).map_err(|e| e.clone())?;
        mean_of(&r.beta_l2, &format!("{s}/{m}"), REPS)
    };

    // 1: within ±0.20 of the reference values
    let mut pass = true;
    let mut detail = String::new();
    for (s, m, target) in TARGETS {
        match mean(s, m) {
            Ok(v) => {
                let ok = (v - target).abs() <= TOL_TABLE;
                pass &= ok;
                let _ = write!(detail, "{s}/{m} {v:.3} (ref {target}{}) ", if ok { "" } else { ", out" });
            }
            Err(e) => {
                pass = false;
                let _ = write!(detail, "{e}; ");
            }
        }
    }
    let src = [&weak, &strong]
        .iter()
        .map(|r| r.as_ref().map(|r| r.source.clone()).unwrap_or_else(|e| e.clone()))
        .collect::<Vec<_>>()
        .join(", ");
    let c1 = Outcome {
        id: 1,
        name: "mean l2 error within 0.20 of reference (20 reps)",
        pass,
        detail: format!("{detail}[{src}]"),
    };

    // 2: IPD <= SASH <= SL, SL - SASH >= 0.05
    let mut pass = true;
    let mut detail = String::new();
    for s in ["weak", "strong"] {
        match (mean(s, "IPD"), mean(s, "SASH"), mean(s, "SL")) {
            (Ok(i), Ok(a), Ok(l)) => {
                let ok = i <= a && a <= l && l - a >= 0.05;
                pass &= ok;
                let _ = write!(detail, "{s}: IPD {i:.3} SASH {a:.3} SL {l:.3} gap {:.3}; ", l - a);
            }
            _ => {
                pass = false;
                let _ = write!(detail, "{s}: missing records; ");
            }
        }
    }
    let c2 = Outcome {
        id: 2,
        name: "ordering IPD <= SASH <= SL with SL-SASH >= 0.05",
        pass,
        detail,
    };

    // 3: weak setting, SASH+ closes the gap to IPD
    let c3 = match (mean("weak", "IPD"), mean("weak", "SASH"), mean("weak", "SASH+")) {
        (Ok(i), Ok(a), Ok(p)) => {
            let gap = a - i;
            let ratio = (p - i) / gap;
            Outcome {
                id: 3,
                name: "SASH+ < SASH and (SASH+ - IPD)/(SASH - IPD) <= 0.8 (weak)",
                pass: p < a && gap > 0.0 && ratio <= 0.8,
                detail: format!("IPD {i:.3} SASH {a:.3} SASH+ {p:.3} ratio {ratio:.3}"),
            }
        }
        _ => Outcome {
            id: 3,
            name: "SASH+ < SASH and (SASH+ - IPD)/(SASH - IPD) <= 0.8 (weak)",
            pass: false,
            detail: "missing records".into(),
        },
    };
    vec![c1, c2, c3]
}

fn rate_criterion() -> Outcome {
    let name = "mean direction error decreases over N_m = 1000, 4000, 8000";
    let mut means = Vec::new();
    let mut detail = String::new();
    for nm in [1000, 4000, 8000] {
        let r = recorded(&format!("rate_nm{nm}")).and_then(|r| mean_of(&r.gamma_l2, &format!("rate-{nm}/SASH"), REPS));
        match r {
            Ok(v) => {
                let _ = write!(detail, "N_m {nm}: {v:.4}; ");
                means.push(v);
            }
            Err(e) => {
                return Outcome {
                    id: 4,
                    name,
                    pass: false,
                    detail: e,
                }
            }
        }
    }
    Outcome {
        id: 4,
        name,
        pass: means[0] > means[1] && means[1] > means[2],
        detail,
    }
}

fn coverage_criterion() -> Outcome {
    let name = "95% interval coverage for beta_01 in [0.90, 0.99] (200 reps)";
    let r = match recorded("coverage") {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                id: 8,
                name,
                pass: false,
                detail: e,
            }
        }
    };
    let (cfg, _) = load_config("coverage");
    let reps = cfg.sim.replications;
    let beta01 = cfg.sim.beta0[0];
    // a replication without an interval counts as a miss
    let covered = r
        .intervals
        .iter()
        .filter(|(_, lo, hi)| *lo <= beta01 && beta01 <= *hi)
        .count();
    let rate = covered as f64 / reps as f64;
    Outcome {
        id: 8,
        name,
        pass: reps == 200 && (0.90..=0.99).contains(&rate),
        detail: format!(
            "{covered}/{reps} covered ({rate:.3}), {} intervals computed [{}]",
            r.intervals.len(),
            r.source
        ),
    }
}

// ------------------------------------------------------------- fast criteria

fn random_site(rng: &mut StdRng, site: usize, n: usize, p: usize) -> Dataset {
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
    let s = Array1::from_shape_fn(n, |_| rng.random_range(0..6) as f64);
    Dataset::new(x, s, None, site).unwrap()
}

fn random_direction(rng: &mut StdRng, p: usize) -> CoefficientVector {
    let mut g = Array1::from_shape_fn(p, |_| rng.random_range(-0.8..0.8));
    g[0] = 1.0;
    CoefficientVector::direction(g).unwrap()
}

fn summary_equivalence() -> Outcome {
    let mut rng = StdRng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let p = rng.random_range(2..=10);
        let m = rng.random_range(2..=4);
        let sites: Vec<Dataset> = (1..=m)
            .map(|s| {
                let n = rng.random_range(20..=50);
                random_site(&mut rng, s, n, p)
            })
            .collect();
        let k = KernelSpec::gaussian(rng.random_range(0.4..1.2)).unwrap();
        let w = WeightScheme::PoissonInverseMean;
        let locals: Vec<CoefficientVector> = (0..m).map(|_| random_direction(&mut rng, p)).collect();
        let summaries: Vec<_> = sites
            .iter()
            .zip(&locals)
            .map(|(d, g)| site_summary_at(d, g, &k, w).unwrap())
            .collect();
        let problems: Vec<_> = sites
            .iter()
            .zip(&locals)
            .map(|(d, g)| one_step_linearized_problem(d, g, &k, w).unwrap())
            .collect();
        let pooled = pool(&summaries).unwrap();
        let n_total: f64 = sites.iter().map(|d| d.n_rows() as f64).sum();
        let diffs: Vec<f64> = (0..5)
            .map(|_| {
                let g = random_direction(&mut rng, p);
                let individual: f64 = problems
                    .iter()
                    .zip(&sites)
                    .map(|(lp, d)| d.n_rows() as f64 / n_total * lp.objective(g.values()))
                    .sum();
                individual - pooled.quadratic(g.values())
            })
            .collect();
        let spread = diffs.iter().map(|d| (d - diffs[0]).abs()).fold(0.0, f64::max);
        worst = worst.max(spread);
    }
    Outcome {
        id: 5,
        name: "summary objective equals pooled linearized objective up to a constant",
        pass: worst <= 1e-8,
        detail: format!("max spread of the difference over 5 probes x 10 instances: {worst:.2e}"),
    }
}

fn gradient_suite() -> Outcome {
    let mut rng = StdRng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut worst_loo: f64 = 0.0;
    let eps = 1e-5;
    for _ in 0..100 {
        let n = rng.random_range(10..=40);
        let p = rng.random_range(2..=6);
        let d = random_site(&mut rng, 1, n, p);
        let g = random_direction(&mut rng, p);
        let k = KernelSpec::gaussian(rng.random_range(0.3..1.5)).unwrap();
        let eval = evaluate_link(d.x(), d.s(), g.values(), &k).unwrap();
        for j in 0..p {
            let mut up = g.values().to_owned();
            let mut dn = up.clone();
            up[j] += eps;
            dn[j] -= eps;
            let fu = evaluate_link(d.x(), d.s(), up.view(), &k).unwrap().fhat;
            let fd = evaluate_link(d.x(), d.s(), dn.view(), &k).unwrap().fhat;
            for i in 0..n {
                if eval.fhat[i].is_nan() {
                    continue;
                }
                let numeric = (fu[i] - fd[i]) / (2.0 * eps);
                let analytic = eval.grad[[i, j]];
                worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1.0));
            }
        }
        let i = rng.random_range(0..n);
        if let Ok(direct) = loo_link_gradient(&d, &g, &k, i) {
            let diff = (&direct - &eval.grad.row(i)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            worst_loo = worst_loo.max(diff);
        }
    }
    Outcome {
        id: 6,
        name: "analytic link gradient matches central differences (100 instances)",
        pass: worst <= 1e-4 && worst_loo <= 1e-10,
        detail: format!("max relative deviation {worst:.2e}; batched vs per-row gradient {worst_loo:.2e}"),
    }
}

fn small_sites(seed: u64) -> (Vec<Dataset>, sash_core::federation::SashConfig) {
    let mut sim = SimConfig::with_shape(Strength::Strong, 3, 100, 10, 250);
    sim.seed = seed;
    (gen_experiment(&sim, 0).unwrap().sites, Default::default())
}

fn kkt_suite() -> Outcome {
    let (sites, cfg) = small_sites(7);
    audit::start(50, 7);
    let run = run_sash(&sites, &cfg).and_then(|r| run_sash_plus(&sites, &r, &cfg).map(|_| r));
    let ipd = fit_ipd(&sites, &cfg);
    let report = audit::finish().expect("audit was open");
    if let Err(e) = run.as_ref().map(|_| ()).and(ipd.as_ref().map(|_| ())) {
        return Outcome {
            id: 7,
            name: "sampled lasso solutions pass the KKT certificate at 1e-6",
            pass: false,
            detail: format!("pipeline failed: {e}"),
        };
    }
    let residuals = report.residuals();
    let worst = residuals.iter().map(|r| r.1).fold(0.0, f64::max);
    let logistic = residuals.iter().filter(|r| r.0 == "logistic").count();
    Outcome {
        id: 7,
        name: "sampled lasso solutions pass the KKT certificate at 1e-6",
        pass: residuals.len() == 50.min(report.seen as usize) && residuals.len() == 50 && worst <= 1e-6,
        detail: format!(
            "{} of {} solves sampled ({logistic} logistic), worst residual {worst:.2e}",
            residuals.len(),
            report.seen
        ),
    }
}

fn bits(f: &FitResult) -> Vec<u64> {
    let mut v = vec![f.alpha.to_bits(), f.beta1.to_bits()];
    v.extend(f.beta_sash.values().iter().map(|x| x.to_bits()));
    v
}

fn datashield() -> Outcome {
    // fuzz: random frame lengths, including ones built from row counts
    let mut rng = StdRng::seed_from_u64(9);
    let mut violations = 0;
    let mut accepted = 0;
    for _ in 0..20_000 {
        let p = rng.random_range(1..=40);
        let n_m = rng.random_range(1..=20_000usize);
        let kind = [Kind::InitBroadcast, Kind::SummaryUpload, Kind::GammaBroadcast][rng.random_range(0..3)];
        let floats = match rng.random_range(0..3) {
            0 => n_m + rng.random_range(0..4),
            1 => payload_len(kind, p).unwrap() / 8,
            _ => rng.random_range(0..1000),
        };
        let mut frame = b"SASH".to_vec();
        frame.extend([1, kind as u8]);
        frame.extend_from_slice(&((8 * floats) as u64).to_le_bytes());
        frame.extend((0..8 * floats).map(|_| 0u8));
        if decode(&frame, Some(p)).is_ok() {
            accepted += 1;
            if 8 * floats != payload_len(kind, p).unwrap() {
                violations += 1;
            }
        }
    }

    let (sites, sash) = small_sites(8);
    let cfg = CoordinatorConfig {
        sash,
        sash_plus: true,
        timeout_secs: 600.0,
    };
    let lib = run_sash(&sites, &cfg.sash).unwrap();
    let lib_plus = run_sash_plus(&sites, &lib, &cfg.sash).unwrap();
    let workers = sites
        .iter()
        .map(|d| SiteWorker::new(d.clone(), cfg.sash.site.clone()))
        .collect();
    let mut t = InProcess::spawn(workers);
    let out = coordinate(&sites[0], &cfg, &mut t).unwrap();
    let transparent = bits(&out.base.fit) == bits(&lib.step3.fit) && bits(out.fit()) == bits(&lib_plus.fit);
    Outcome {
        id: 9,
        name: "accepted payload lengths never depend on N_m; transport is bitwise transparent",
        pass: violations == 0 && accepted > 0 && transparent,
        detail: format!(
            "{accepted} of 20000 fuzzed frames accepted, {violations} with a non-p-determined length; loopback {}",
            if transparent { "bitwise identical" } else { "DIFFERS" }
        ),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = table_criteria();
    outcomes.push(rate_criterion());
    outcomes.push(summary_equivalence());
    outcomes.push(gradient_suite());
    outcomes.push(kkt_suite());
    outcomes.push(coverage_criterion());
    outcomes.push(datashield());
    outcomes.sort_by_key(|o| o.id);
    for o in &outcomes {
        println!(
            "criterion {} {}: {} -- {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
