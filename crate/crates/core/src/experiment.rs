//! Monte Carlo harness: simulate, fit every method, score against the truth.

use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_ipd_from, sl_from_step1};
use crate::data::CoefficientVector;
use crate::error::Result;
use crate::federation::{
    confidence_interval, run_sash, run_sash_plus, step1_supervised_init, ConfidenceInterval,
    SashConfig,
};
use crate::metrics::{l1_error, l2_error, ReplicationRecord};
use crate::simgen::{gen_experiment, SimConfig, SimReplication};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SL")]
    Sl,
    #[serde(rename = "SASH")]
    Sash,
    #[serde(rename = "SASH+")]
    SashPlus,
    #[serde(rename = "IPD")]
    Ipd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sl, Method::Sash, Method::SashPlus, Method::Ipd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sl => "SL",
            Method::Sash => "SASH",
            Method::SashPlus => "SASH+",
            Method::Ipd => "IPD",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::SashError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| crate::error::SashError::InvalidInput(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Label written into every record, e.g. `weak`.
    pub setting: String,
    pub sim: SimConfig,
    #[serde(default)]
    pub sash: SashConfig,
    pub methods: Vec<Method>,
    /// Also compute a (1−δ) interval for `β₀₁` from the SASH fit.
    #[serde(default)]
    pub interval_delta: Option<f64>,
}

impl ExperimentConfig {
    pub fn new(setting: &str, sim: SimConfig) -> Self {
        Self {
            setting: setting.to_string(),
            sim,
            sash: SashConfig::default(),
            methods: Method::ALL.to_vec(),
            interval_delta: None,
        }
    }
}

/// Everything scored on one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub records: Vec<ReplicationRecord>,
    /// Interval for `β₀₁` from the SASH fit, when requested.
    pub interval: Option<ConfidenceInterval>,
}

/// `γ₀ = β₀/β₀₁`.
pub fn true_direction(beta0: &[f64]) -> Array1<f64> {
    let b = Array1::from(beta0.to_vec());
    &b / b[0]
}

fn record(
    cfg: &ExperimentConfig,
    rep: usize,
    method: Method,
    beta: &CoefficientVector,
    gamma: Option<&CoefficientVector>,
    secs: f64,
) -> Result<ReplicationRecord> {
    let beta0 = Array1::from(cfg.sim.beta0.clone());
    let gamma0 = true_direction(&cfg.sim.beta0);
    Ok(ReplicationRecord {
        method: method.name().to_string(),
        setting: cfg.setting.clone(),
        replication: rep,
        seed: cfg.sim.seed,
        beta_l2: l2_error(beta.values(), beta0.view())?,
        beta_l1: l1_error(beta.values(), beta0.view())?,
        gamma_l2: match gamma {
            Some(g) => l2_error(g.values(), gamma0.view())?,
            None => f64::NAN,
        },
        runtime_secs: secs,
    })
}

fn failed(cfg: &ExperimentConfig, rep: usize, method: Method, secs: f64) -> ReplicationRecord {
    ReplicationRecord {
        method: method.name().to_string(),
        setting: cfg.setting.clone(),
        replication: rep,
        seed: cfg.sim.seed,
        beta_l2: f64::NAN,
        beta_l1: f64::NAN,
        gamma_l2: f64::NAN,
        runtime_secs: secs,
    }
}

/// Fits the configured methods on one simulated replication. A method that
/// fails numerically yields a record of NaNs (counted as a failure by
/// [`crate::metrics::summarize`]); a failing supervised initialization fails
/// every method.
pub fn run_replication(cfg: &ExperimentConfig, rep: usize) -> Result<ReplicationOutcome> {
    let data = gen_experiment(&cfg.sim, rep)?;
    run_on(cfg, &data)
}

pub fn run_on(cfg: &ExperimentConfig, data: &SimReplication) -> Result<ReplicationOutcome> {
    let rep = data.replication;
    let wants = |m: Method| cfg.methods.contains(&m);
    let mut records = Vec::new();
    let mut interval = None;

    let t0 = Instant::now();
    let step1 = step1_supervised_init(&data.sites[0], &cfg.sash.step1)?;
    let t_step1 = t0.elapsed().as_secs_f64();
    if wants(Method::Sl) {
        let sl = sl_from_step1(&step1);
        records.push(record(cfg, rep, Method::Sl, &sl.beta, Some(&step1.gamma_sup), t_step1)?);
    }

    if wants(Method::Sash) || wants(Method::SashPlus) {
        let t = Instant::now();
        match run_sash(&data.sites, &cfg.sash) {
            Ok(run) => {
                let t_sash = t.elapsed().as_secs_f64();
                let fit = &run.step3.fit;
                if wants(Method::Sash) {
                    records.push(record(cfg, rep, Method::Sash, &fit.beta_sash, Some(&fit.gamma_dagger), t_sash)?);
                }
                if let Some(delta) = cfg.interval_delta {
                    let e1 = CoefficientVector::e1(cfg.sim.p);
                    interval = confidence_interval(
                        &data.sites[0],
                        fit,
                        e1.values(),
                        delta,
                        cfg.sash.ci_entry,
                    )
                    .map_err(|e| log::warn!("replication {rep}: interval failed: {e}"))
                    .ok();
                }
                if wants(Method::SashPlus) {
                    let t = Instant::now();
                    match run_sash_plus(&data.sites, &run, &cfg.sash) {
                        Ok(plus) => records.push(record(
                            cfg,
                            rep,
                            Method::SashPlus,
                            &plus.fit.beta_sash,
                            Some(&plus.fit.gamma_dagger),
                            t_sash + t.elapsed().as_secs_f64(),
                        )?),
                        Err(e) => {
                            log::warn!("replication {rep}: SASH+ failed: {e}");
                            records.push(failed(cfg, rep, Method::SashPlus, t.elapsed().as_secs_f64()));
                        }
                    }
                }
            }
            Err(e) => {
                log::warn!("replication {rep}: SASH failed: {e}");
                let secs = t.elapsed().as_secs_f64();
                for m in [Method::Sash, Method::SashPlus] {
                    if wants(m) {
                        records.push(failed(cfg, rep, m, secs));
                    }
                }
            }
        }
    }

    if wants(Method::Ipd) {
        let t = Instant::now();
        match fit_ipd_from(&data.sites, &step1, &cfg.sash) {
            Ok(ipd) => records.push(record(
                cfg,
                rep,
                Method::Ipd,
                &ipd.beta,
                ipd.gamma.as_ref(),
                t_step1 + t.elapsed().as_secs_f64(),
            )?),
            Err(e) => {
                log::warn!("replication {rep}: IPD failed: {e}");
                records.push(failed(cfg, rep, Method::Ipd, t.elapsed().as_secs_f64()));
            }
        }
    }
    Ok(ReplicationOutcome { records, interval })
}

/// Replications `0..reps`, sequentially; each replication is internally
/// parallel inside kernel evaluation.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    reps: usize,
    mut progress: impl FnMut(&ReplicationOutcome),
) -> Result<Vec<ReplicationOutcome>> {
    let mut out = Vec::with_capacity(reps);
    for rep in 0..reps {
        let o = run_replication(cfg, rep)?;
        progress(&o);
        out.push(o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::Strength;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("lasso".parse::<Method>().is_err());
    }

    #[test]
    fn true_direction_is_normalized() {
        let g = true_direction(&[2.0, -1.0, 0.0]);
        assert_eq!(g.to_vec(), vec![1.0, -0.5, 0.0]);
    }

    #[test]
    fn small_replication_scores_every_method() {
        let mut sim = SimConfig::with_shape(Strength::Strong, 2, 120, 10, 300);
        sim.seed = 7;
        let cfg = ExperimentConfig::new("tiny", sim);
        let out = run_replication(&cfg, 0).unwrap();
        let names: Vec<&str> = out.records.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, vec!["SL", "SASH", "SASH+", "IPD"]);
        for r in &out.records {
            assert!(r.beta_l2.is_finite() && r.beta_l2 >= 0.0, "{r:?}");
        }
    }
}
