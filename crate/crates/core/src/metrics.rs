//! Estimation error, prediction metrics, stratified K-fold CV and
//! replication summaries.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SashError};

const PROB_CLAMP: f64 = 1e-12;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(SashError::Dimension(format!("lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(SashError::Empty("metric over no observations".into()));
    }
    Ok(())
}

pub fn l2_error(est: ArrayView1<'_, f64>, truth: ArrayView1<'_, f64>) -> Result<f64> {
    same_len(est.len(), truth.len())?;
    Ok(est
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn l1_error(est: ArrayView1<'_, f64>, truth: ArrayView1<'_, f64>) -> Result<f64> {
    same_len(est.len(), truth.len())?;
    Ok(est.iter().zip(truth.iter()).map(|(a, b)| (a - b).abs()).sum())
}

/// Mann–Whitney AUC with half credit for ties.
pub fn auc(scores: ArrayView1<'_, f64>, labels: ArrayView1<'_, f64>) -> Result<f64> {
    same_len(scores.len(), labels.len())?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut ranks = vec![0.0; idx.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = mid;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SashError::SingleClass);
    }
    let rank_sum: f64 = (0..labels.len())
        .filter(|&i| labels[i] == 1.0)
        .map(|i| ranks[i])
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn brier(prob: ArrayView1<'_, f64>, labels: ArrayView1<'_, f64>) -> Result<f64> {
    same_len(prob.len(), labels.len())?;
    Ok(prob
        .iter()
        .zip(labels.iter())
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / prob.len() as f64)
}

/// Scale applied to the mean negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DevianceScale {
    #[default]
    TwiceNegLogLik,
    NegLogLik,
}

pub fn deviance(
    prob: ArrayView1<'_, f64>,
    labels: ArrayView1<'_, f64>,
    scale: DevianceScale,
) -> Result<f64> {
    same_len(prob.len(), labels.len())?;
    let nll = prob
        .iter()
        .zip(labels.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / prob.len() as f64;
    Ok(match scale {
        DevianceScale::TwiceNegLogLik => 2.0 * nll,
        DevianceScale::NegLogLik => nll,
    })
}

/// Seeded fold labels. Binary labels are stratified: each class is shuffled
/// and dealt round-robin, continuing the deal across classes.
pub fn stratified_folds(labels: ArrayView1<'_, f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > labels.len() {
        return Err(SashError::InvalidInput(format!(
            "need 2 <= folds <= {}, got {k}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1.0).collect();
    let mut rest: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1.0).collect();
    pos.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    for (slot, i) in pos.into_iter().chain(rest).enumerate() {
        folds[i] = slot % k;
    }
    Ok(folds)
}

/// Runs `fit_score(train, test)` over stratified folds of the labeled rows.
pub fn kfold_cv<F>(d: &Dataset, k: usize, seed: u64, mut fit_score: F) -> Result<Vec<f64>>
where
    F: FnMut(&Dataset, &Dataset) -> Result<f64>,
{
    let lab = d.labeled()?;
    let y = lab.y().ok_or(SashError::Empty("no labeled rows".into()))?;
    let folds = stratified_folds(y, k, seed)?;
    (0..k)
        .map(|f| {
            let train: Vec<usize> = (0..lab.n_rows()).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..lab.n_rows()).filter(|&i| folds[i] == f).collect();
            fit_score(&lab.select_rows(&train)?, &lab.select_rows(&test)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub method: String,
    pub setting: String,
    pub replication: usize,
    pub seed: u64,
    pub beta_l2: f64,
    pub beta_l1: f64,
    pub gamma_l2: f64,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub setting: String,
    pub method: String,
    pub count: usize,
    /// Replications whose fit failed (non-finite error), excluded from the statistics.
    pub failed: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub beta_l2: Vec<MethodSummary>,
    pub gamma_l2: Vec<MethodSummary>,
}

impl Report {
    pub fn mean_beta_l2(&self, setting: &str, method: &str) -> Option<f64> {
        self.beta_l2
            .iter()
            .find(|s| s.setting == setting && s.method == method)
            .map(|s| s.mean)
    }

    pub fn mean_gamma_l2(&self, setting: &str, method: &str) -> Option<f64> {
        self.gamma_l2
            .iter()
            .find(|s| s.setting == setting && s.method == method)
            .map(|s| s.mean)
    }

    /// `metric,setting,method,count,failed,mean,median,q1,q3,sd`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,setting,method,count,failed,mean,median,q1,q3,sd\n");
        for (metric, rows) in [("beta_l2", &self.beta_l2), ("gamma_l2", &self.gamma_l2)] {
            for s in rows {
                out.push_str(&format!(
                    "{metric},{},{},{},{},{},{},{},{},{}\n",
                    s.setting, s.method, s.count, s.failed, s.mean, s.median, s.q1, s.q3, s.sd
                ));
            }
        }
        out
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn describe(setting: &str, method: &str, all: &[f64]) -> MethodSummary {
    let mut values: Vec<f64> = all.iter().copied().filter(|v| v.is_finite()).collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let failed = all.len() - n;
    if n == 0 {
        return MethodSummary {
            setting: setting.to_string(),
            method: method.to_string(),
            count: 0,
            failed,
            mean: f64::NAN,
            median: f64::NAN,
            q1: f64::NAN,
            q3: f64::NAN,
            sd: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MethodSummary {
        setting: setting.to_string(),
        method: method.to_string(),
        count: n,
        failed,
        mean,
        median: quantile(&values, 0.5),
        q1: quantile(&values, 0.25),
        q3: quantile(&values, 0.75),
        sd,
    }
}

pub fn summarize(records: &[ReplicationRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(SashError::Empty("no replication records".into()));
    }
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let g = groups
            .entry((r.setting.clone(), r.method.clone()))
            .or_default();
        g.0.push(r.beta_l2);
        g.1.push(r.gamma_l2);
    }
    let mut beta_l2 = Vec::new();
    let mut gamma_l2 = Vec::new();
    for ((setting, method), (b, g)) in groups {
        beta_l2.push(describe(&setting, &method, &b));
        if g.iter().any(|v| v.is_finite()) {
            gamma_l2.push(describe(&setting, &method, &g));
        }
    }
    Ok(Report { beta_l2, gamma_l2 })
}

/// Long-format dump `method,rep,metric,value` (setting folded into method).
pub fn long_format(records: &[ReplicationRecord]) -> String {
    let mut out = String::from("method,rep,metric,value\n");
    for r in records {
        let m = format!("{}/{}", r.setting, r.method);
        for (metric, v) in [
            ("beta_l2", r.beta_l2),
            ("beta_l1", r.beta_l1),
            ("gamma_l2", r.gamma_l2),
            ("runtime_secs", r.runtime_secs),
        ] {
            out.push_str(&format!("{m},{},{metric},{v}\n", r.replication));
        }
    }
    out
}
