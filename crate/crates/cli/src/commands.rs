use std::fmt::Write as _;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use serde::Serialize;

use sash_core::baselines::{fit_ipd, sl_from_step1, BaselineResult};
use sash_core::data::{load_dataset, save_dataset, ColumnSchema, Diagnostics};
use sash_core::experiment::{run_experiment, true_direction, ExperimentConfig};
use sash_core::federation::{
    confidence_interval, step1_supervised_init, step3, Broadcast, ConfidenceInterval, ScheduleMode, SiteSummary,
    Step3Output,
};
use sash_core::metrics::{auc, brier, deviance, kfold_cv, l1_error, l2_error, long_format, summarize, DevianceScale};
use sash_core::simgen::{gen_experiment, SimConfig, Strength};
use sash_core::{CoefficientVector, Dataset, FitResult};
use sash_transport::codec::{decode, encode, Message};
use sash_transport::transport::{serve_files, serve_tcp, site_dir};
use sash_transport::{
    coordinate, run_coordinator, run_site, CoordinatorConfig, CoordinatorOutput, FileDrop, InProcess, RunManifest,
    SiteWorker, Tcp,
};

use crate::{Command, Common, PlainAction, RunArgs, SashAction, SashRun, Setting, TransportKind};

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// What every run command writes next to its full output: enough to score
/// or apply the fit.
#[derive(Debug, Serialize, serde::Deserialize)]
struct Estimate {
    method: String,
    alpha: f64,
    beta: Vec<f64>,
    gamma: Option<Vec<f64>>,
    diagnostics: Diagnostics,
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitConfig { setting, small } => init_config(setting, small),
        Command::Simgen { common, rep } => simgen(&common, rep),
        Command::SiteFit {
            common,
            data,
            site_id,
            broadcast,
            out,
        } => site_fit(&common, &data, site_id, &broadcast, &out),
        Command::Aggregate {
            common,
            labeled,
            summaries,
        } => aggregate(&common, &labeled, &summaries),
        Command::SiteServe {
            common,
            manifest,
            data,
            site_id,
        } => site_serve(&common, &manifest, &data, site_id),
        Command::Sash {
            action: SashAction::Run { run, sash },
        } => sash_run(&run, &sash),
        Command::Ipd {
            action: PlainAction::Run { run },
        } => ipd_run(&run),
        Command::Sl {
            action: PlainAction::Run { run },
        } => sl_run(&run),
        Command::Eval {
            common,
            data,
            estimate,
            truth,
            folds,
        } => eval(&common, &data, estimate.as_deref(), truth.as_deref(), folds),
        Command::Experiment { common, reps, progress } => experiment(&common, reps, progress),
    }
}

fn strength(s: Setting) -> (Strength, &'static str) {
    match s {
        Setting::Weak => (Strength::Weak, "weak"),
        Setting::Strong => (Strength::Strong, "strong"),
    }
}

fn init_config(setting: Setting, small: bool) -> Result<()> {
    let (st, name) = strength(setting);
    let sim = if small {
        SimConfig::with_shape(st, 3, 100, 20, 500)
    } else {
        SimConfig::paper(st)
    };
    let mut cfg = ExperimentConfig::new(name, sim);
    cfg.interval_delta = Some(0.05);
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    Ok(())
}

fn require_config(common: &Common) -> Result<()> {
    if common.config.is_none() {
        return Err(UsageError("--config <json> is required".into()).into());
    }
    Ok(())
}

/// Loads the configuration and applies command-line overrides.
fn setup(common: &Common) -> Result<ExperimentConfig> {
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(sash_core::SashError::from)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::new("weak", SimConfig::paper(Strength::Weak)),
    };
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
        cfg.sash.step1.seed = seed;
    }
    if let Some(grid) = &common.lambda_grid {
        cfg.sash.step1.lambda_grid = Some(grid.clone());
    }
    if let Some([h]) = common.bandwidth_grid.as_deref() {
        cfg.sash.site.bandwidth = Some(*h);
    }
    if common.bic {
        cfg.sash.site.schedule = ScheduleMode::Theoretical;
    } else if common.cv {
        cfg.sash.site.schedule = ScheduleMode::CvShaped;
    }
    fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
    Ok(cfg)
}

/// One `(bandwidth, output directory)` per requested bandwidth.
fn sweep(common: &Common, cfg: &ExperimentConfig) -> Result<Vec<(ExperimentConfig, PathBuf)>> {
    match common.bandwidth_grid.as_deref() {
        Some(grid) if grid.len() > 1 => grid
            .iter()
            .map(|&h| {
                let mut c = cfg.clone();
                c.sash.site.bandwidth = Some(h);
                c.setting = format!("{}-h{h}", cfg.setting);
                let dir = common.out_dir.join(format!("h{h}"));
                fs::create_dir_all(&dir)?;
                Ok((c, dir))
            })
            .collect(),
        _ => Ok(vec![(cfg.clone(), common.out_dir.clone())]),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_site(path: &Path, site_id: usize) -> Result<Dataset> {
    load_dataset(path, &ColumnSchema::default(), site_id)
        .with_context(|| format!("loading {}", path.display()))
}

/// Site datasets and, for simulated data, the true coefficients.
fn load_sites(run: &RunArgs, cfg: &ExperimentConfig) -> Result<(Vec<Dataset>, Option<Vec<f64>>)> {
    if run.data.is_empty() {
        let rep = gen_experiment(&cfg.sim, run.rep)?;
        return Ok((rep.sites, Some(cfg.sim.beta0.clone())));
    }
    let sites = run
        .data
        .iter()
        .enumerate()
        .map(|(i, p)| load_site(p, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok((sites, None))
}

fn write_estimate(dir: &Path, est: &Estimate, truth: Option<&[f64]>) -> Result<()> {
    write_json(&dir.join("estimate.json"), est)?;
    let mut csv = String::from("j,beta,gamma\n");
    for (j, b) in est.beta.iter().enumerate() {
        let g = est.gamma.as_ref().map(|g| g[j].to_string()).unwrap_or_default();
        writeln!(csv, "{},{b},{g}", j + 1)?;
    }
    fs::write(dir.join("report.csv"), csv)?;
    if let Some(t) = truth {
        let t = Array1::from(t.to_vec());
        let b = Array1::from(est.beta.clone());
        let mut csv = String::from("metric,value\n");
        writeln!(csv, "beta_l2,{}", l2_error(b.view(), t.view())?)?;
        writeln!(csv, "beta_l1,{}", l1_error(b.view(), t.view())?)?;
        if let Some(g) = &est.gamma {
            let g = Array1::from(g.clone());
            writeln!(csv, "gamma_l2,{}", l2_error(g.view(), true_direction(&t.to_vec()).view())?)?;
        }
        fs::write(dir.join("metrics.csv"), csv)?;
    }
    Ok(())
}

fn estimate_of_fit(method: &str, fit: &FitResult) -> Estimate {
    Estimate {
        method: method.into(),
        alpha: fit.alpha,
        beta: fit.beta_sash.values().to_vec(),
        gamma: Some(fit.gamma_dagger.values().to_vec()),
        diagnostics: fit.diagnostics.clone(),
    }
}

fn estimate_of_baseline(b: &BaselineResult) -> Estimate {
    Estimate {
        method: b.method.name().into(),
        alpha: b.diagnostics.get("alpha").and_then(|v| v.as_f64()).unwrap_or(f64::NAN),
        beta: b.beta.values().to_vec(),
        gamma: b.gamma.as_ref().map(|g| g.values().to_vec()),
        diagnostics: b.diagnostics.clone(),
    }
}

fn simgen(common: &Common, rep: usize) -> Result<()> {
    require_config(common)?;
    let cfg = setup(common)?;
    let data = gen_experiment(&cfg.sim, rep)?;
    for d in &data.sites {
        let path = common.out_dir.join(format!("site-{}.csv", d.site_id()));
        save_dataset(d, &path)?;
        log::info!("wrote {} ({} rows)", path.display(), d.n_rows());
    }
    write_json(&common.out_dir.join("truth.json"), &cfg.sim.beta0)?;
    Ok(())
}

fn site_fit(common: &Common, data: &Path, site_id: usize, broadcast: &Path, out: &Path) -> Result<()> {
    let cfg = setup(common)?;
    let d = load_site(data, site_id)?;
    let frame = fs::read(broadcast).with_context(|| format!("reading {}", broadcast.display()))?;
    let worker = SiteWorker::new(d, cfg.sash.site.clone());
    let (reply, _) = worker.handle_bytes(&frame);
    match decode(&reply, None)? {
        Message::SummaryUpload(_) => {}
        Message::ErrorReport(e) => bail!(sash_transport::TransportError::Remote { site: site_id, message: e }),
        other => bail!("unexpected reply {:?}", other.kind()),
    }
    fs::write(out, reply).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct SashOutput<'a> {
    method: &'a str,
    base: &'a Step3Output,
    plus: Option<&'a Step3Output>,
    sites: Vec<usize>,
    interval: Option<ConfidenceInterval>,
}

fn interval(cfg: &ExperimentConfig, labeled: &Dataset, fit: &FitResult) -> Option<ConfidenceInterval> {
    let delta = cfg.interval_delta?;
    let e1 = CoefficientVector::e1(labeled.p());
    confidence_interval(labeled, fit, e1.values(), delta, cfg.sash.ci_entry)
        .map_err(|e| log::warn!("interval: {e}"))
        .ok()
}

fn aggregate(common: &Common, labeled: &Path, summaries: &[PathBuf]) -> Result<()> {
    let cfg = setup(common)?;
    let lab = load_site(labeled, 1)?;
    let got = summaries
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            match decode(&bytes, Some(lab.p())).with_context(|| p.display().to_string())? {
                Message::SummaryUpload(s) => Ok(s),
                other => bail!("{}: expected a summary, got {:?}", p.display(), other.kind()),
            }
        })
        .collect::<Result<Vec<SiteSummary>>>()?;
    let out = step3(&got, &lab, &cfg.sash)?;
    let gamma = match cfg.sash.broadcast {
        Broadcast::Refined => &out.fit.gamma_dagger,
        Broadcast::Aggregated => &out.gamma_hat,
    };
    fs::write(
        common.out_dir.join("gamma.sash"),
        encode(&Message::GammaBroadcast {
            gamma: gamma.values().to_owned(),
        }),
    )?;
    write_json(
        &common.out_dir.join("fit.json"),
        &SashOutput {
            method: "SASH",
            base: &out,
            plus: None,
            sites: got.iter().map(|s| s.site_id).collect(),
            interval: interval(&cfg, &lab, &out.fit),
        },
    )?;
    write_estimate(&common.out_dir, &estimate_of_fit("SASH", &out.fit), None)
}

fn site_serve(common: &Common, manifest: &Path, data: &Path, site_id: usize) -> Result<()> {
    let cfg = setup(common)?;
    let m = RunManifest::load(manifest)?;
    let d = load_site(data, site_id)?;
    run_site(&m, d, &cfg.sash, Duration::from_secs(3600))?;
    Ok(())
}

fn workers(sites: &[Dataset], cfg: &ExperimentConfig) -> Vec<SiteWorker> {
    sites
        .iter()
        .map(|d| SiteWorker::new(d.clone(), cfg.sash.site.clone()))
        .collect()
}

fn federate(sites: &[Dataset], cfg: &ExperimentConfig, opts: &SashRun, dir: &Path) -> Result<CoordinatorOutput> {
    let ccfg = CoordinatorConfig {
        sash: cfg.sash.clone(),
        sash_plus: opts.sash_plus,
        timeout_secs: opts.timeout,
    };
    let labeled = &sites[0];
    if let Some(path) = &opts.manifest {
        let m = RunManifest::load(path)?;
        return Ok(run_coordinator(&m, labeled, &ccfg)?);
    }
    let timeout = Duration::from_secs_f64(opts.timeout);
    let out = match opts.transport {
        TransportKind::Inproc => {
            let mut t = InProcess::spawn(workers(sites, cfg));
            coordinate(labeled, &ccfg, &mut t)?
        }
        TransportKind::Tcp => {
            let mut endpoints = Vec::new();
            let mut handles = Vec::new();
            for w in workers(sites, cfg) {
                let listener = TcpListener::bind("127.0.0.1:0")?;
                endpoints.push((w.site_id(), listener.local_addr()?.to_string()));
                handles.push(thread::spawn(move || serve_tcp(&listener, &w)));
            }
            let mut t = Tcp::connect(&endpoints, timeout)?;
            let out = coordinate(labeled, &ccfg, &mut t)?;
            for h in handles {
                h.join().expect("site thread panicked")?;
            }
            out
        }
        TransportKind::Files => {
            let root = dir.join("drop");
            let ids: Vec<usize> = sites.iter().map(|d| d.site_id()).collect();
            let handles: Vec<_> = workers(sites, cfg)
                .into_iter()
                .map(|w| {
                    let d = site_dir(&root, w.site_id());
                    thread::spawn(move || serve_files(&d, &w, timeout))
                })
                .collect();
            let mut t = FileDrop::under(&root, &ids)?;
            let out = coordinate(labeled, &ccfg, &mut t)?;
            for h in handles {
                h.join().expect("site thread panicked")?;
            }
            out
        }
    };
    Ok(out)
}

fn sash_run(run: &RunArgs, opts: &SashRun) -> Result<()> {
    let base = setup(&run.common)?;
    for (cfg, dir) in sweep(&run.common, &base)? {
        let (sites, truth) = load_sites(run, &cfg)?;
        let out = federate(&sites, &cfg, opts, &dir)?;
        let method = if out.plus.is_some() { "SASH+" } else { "SASH" };
        write_json(
            &dir.join("fit.json"),
            &SashOutput {
                method,
                base: &out.base,
                plus: out.plus.as_ref(),
                sites: out.summaries.iter().map(|s| s.site_id).collect(),
                interval: interval(&cfg, &sites[0], out.fit()),
            },
        )?;
        write_estimate(&dir, &estimate_of_fit(method, out.fit()), truth.as_deref())?;
        log::info!("{method}: wrote {}", dir.join("fit.json").display());
    }
    Ok(())
}

fn ipd_run(run: &RunArgs) -> Result<()> {
    let base = setup(&run.common)?;
    for (cfg, dir) in sweep(&run.common, &base)? {
        let (sites, truth) = load_sites(run, &cfg)?;
        let fit = fit_ipd(&sites, &cfg.sash)?;
        write_json(&dir.join("fit.json"), &fit)?;
        write_estimate(&dir, &estimate_of_baseline(&fit), truth.as_deref())?;
    }
    Ok(())
}

fn sl_run(run: &RunArgs) -> Result<()> {
    let cfg = setup(&run.common)?;
    let dir = &run.common.out_dir;
    let (sites, truth) = load_sites(run, &cfg)?;
    let s1 = step1_supervised_init(&sites[0], &cfg.sash.step1)?;
    let fit = sl_from_step1(&s1);
    write_json(&dir.join("fit.json"), &fit)?;
    write_estimate(dir, &estimate_of_baseline(&fit), truth.as_deref())?;
    fs::write(
        dir.join("init.sash"),
        encode(&Message::InitBroadcast {
            n_labeled: sites[0].n_labeled(),
            gamma: s1.gamma_sup.values().to_owned(),
        }),
    )?;
    Ok(())
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn eval(common: &Common, data: &Path, estimate: Option<&Path>, truth: Option<&Path>, folds: Option<usize>) -> Result<()> {
    let cfg = setup(common)?;
    let d = load_site(data, 1)?.labeled()?;
    let y = d.y().context("no labeled rows")?;
    let mut out = serde_json::Map::new();
    if let Some(k) = folds {
        let scores = kfold_cv(&d, k, cfg.sash.step1.seed, |train, test| {
            let s1 = step1_supervised_init(train, &cfg.sash.step1)?;
            let prob = (test.x().dot(&s1.beta_sup) + s1.alpha).mapv(sigmoid);
            auc(prob.view(), test.y().expect("labeled fold"))
        })?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        out.insert("sl_cv_auc".into(), serde_json::to_value(&scores)?);
        out.insert("sl_cv_auc_mean".into(), mean.into());
    } else if let Some(path) = estimate {
        let est: Estimate = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(sash_core::SashError::from)
            .with_context(|| format!("parsing {}", path.display()))?;
        if est.beta.len() != d.p() {
            bail!(sash_core::SashError::Dimension(format!(
                "estimate has {} coefficients, data has {}",
                est.beta.len(),
                d.p()
            )));
        }
        let prob = (d.x().dot(&Array1::from(est.beta.clone())) + est.alpha).mapv(sigmoid);
        out.insert("method".into(), est.method.clone().into());
        out.insert("auc".into(), auc(prob.view(), y)?.into());
        out.insert("brier".into(), brier(prob.view(), y)?.into());
        out.insert("deviance".into(), deviance(prob.view(), y, DevianceScale::TwiceNegLogLik)?.into());
        if let Some(t) = truth {
            let t: Vec<f64> = serde_json::from_str(&fs::read_to_string(t)?).map_err(sash_core::SashError::from)?;
            let (b, t) = (Array1::from(est.beta), Array1::from(t));
            out.insert("beta_l2".into(), l2_error(b.view(), t.view())?.into());
            out.insert("beta_l1".into(), l1_error(b.view(), t.view())?.into());
        }
    } else {
        return Err(UsageError("eval needs --estimate or --folds".into()).into());
    }
    let text = serde_json::to_string_pretty(&out)?;
    fs::write(common.out_dir.join("eval.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn experiment(common: &Common, reps: Option<usize>, progress: bool) -> Result<()> {
    require_config(common)?;
    let base = setup(common)?;
    let reps = reps.unwrap_or(base.sim.replications);
    write_json(&common.out_dir.join("config.json"), &base)?;
    let mut all = Vec::new();
    let mut intervals = String::from("setting,replication,lower,upper,level,covers\n");
    for (cfg, _) in sweep(common, &base)? {
        let beta01 = cfg.sim.beta0[0];
        let mut records = Vec::new();
        run_experiment(&cfg, reps, |o| {
            for r in &o.records {
                log::info!("{} rep {}: {} l2 {:.4} ({:.1} s)", r.setting, r.replication, r.method, r.beta_l2, r.runtime_secs);
            }
            if let Some(ci) = &o.interval {
                let rep = o.records.first().map_or(0, |r| r.replication);
                let covers = ci.lower <= beta01 && beta01 <= ci.upper;
                let _ = writeln!(intervals, "{},{rep},{},{},{},{covers}", cfg.setting, ci.lower, ci.upper, ci.level);
            }
            records.extend(o.records.iter().cloned());
            if progress {
                let mut so_far = all.clone();
                so_far.extend(records.iter().cloned());
                if let Err(e) = fs::write(common.out_dir.join("records.csv"), long_format(&so_far)) {
                    log::warn!("writing progress: {e}");
                }
            }
        })?;
        all.extend(records);
    }
    fs::write(common.out_dir.join("records.csv"), long_format(&all))?;
    let report = summarize(&all)?;
    fs::write(common.out_dir.join("summary.csv"), report.to_csv())?;
    if base.interval_delta.is_some() {
        fs::write(common.out_dir.join("intervals.csv"), intervals)?;
    }
    println!("{}", report.to_csv());
    Ok(())
}
