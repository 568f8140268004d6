//! Synthetic multi-site data: correlated count covariates, logistic outcomes
//! and Poisson or Bernoulli surrogates.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SashError};
use crate::solvers::sigmoid;

/// Leading entries of the true coefficient vector; the rest are zero.
pub const BETA0_TEMPLATE: [f64; 8] = [1.0, -1.0, 0.5, -0.5, 0.25, -0.25, 0.125, -0.125];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strength {
    Weak,
    Strong,
}

/// Surrogate law given the label, per site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SurrogateLaw {
    /// `S | Y ~ Poisson(mu1)` if `Y = 1`, else `Poisson(mu0)`.
    Poisson { mu1: f64, mu0: f64 },
    /// `S | Y ~ Bernoulli(nu1)` if `Y = 1`, else `Bernoulli(nu0)`.
    Bernoulli { nu1: f64, nu0: f64 },
}

impl SurrogateLaw {
    fn validate(&self) -> Result<()> {
        match *self {
            SurrogateLaw::Poisson { mu1, mu0 } if mu1 > 0.0 && mu0 > 0.0 => Ok(()),
            SurrogateLaw::Bernoulli { nu1, nu0 }
                if nu1 > 0.0 && nu1 < 1.0 && nu0 > 0.0 && nu0 < 1.0 =>
            {
                Ok(())
            }
            other => Err(SashError::InvalidInput(format!(
                "invalid surrogate parameters {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub n_m: Vec<usize>,
    pub beta0: Vec<f64>,
    pub surrogates: Vec<SurrogateLaw>,
    pub covariate_mean: f64,
    pub rho: f64,
    pub seed: u64,
    pub replications: usize,
}

impl SimConfig {
    /// Four sites, 200 labels, 300 covariates and 8000 rows per site; the
    /// first half of the sites carry count surrogates, the rest binary ones.
    pub fn paper(strength: Strength) -> Self {
        Self::with_shape(strength, 4, 200, 300, 8000)
    }

    pub fn with_shape(strength: Strength, m: usize, n: usize, p: usize, n_m: usize) -> Self {
        let (mu1, nu1, nu0) = match strength {
            Strength::Weak => (3.0, 0.75, 0.25),
            Strength::Strong => (5.0, 0.85, 0.15),
        };
        let surrogates = (1..=m)
            .map(|site| {
                if site <= m / 2 {
                    SurrogateLaw::Poisson { mu1, mu0: 1.0 }
                } else {
                    SurrogateLaw::Bernoulli { nu1, nu0 }
                }
            })
            .collect();
        Self {
            m,
            n,
            p,
            n_m: vec![n_m; m],
            beta0: beta0_template(p),
            surrogates,
            covariate_mean: 5.0,
            rho: 0.25,
            seed: 20_240_101,
            replications: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n_m.len() != self.m || self.surrogates.len() != self.m {
            return Err(SashError::InvalidInput(
                "site count must match the per-site sizes and surrogate laws".into(),
            ));
        }
        if self.p < BETA0_TEMPLATE.len() || self.beta0.len() != self.p {
            return Err(SashError::InvalidInput(format!(
                "need p >= {} and beta0 of length p",
                BETA0_TEMPLATE.len()
            )));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.covariate_mean > 0.0) {
            return Err(SashError::InvalidInput(
                "need 0 <= rho < 1 and a positive covariate mean".into(),
            ));
        }
        if self.n > self.n_m[0] || self.n < 2 {
            return Err(SashError::InvalidInput(
                "labeled size must be at least 2 and fit inside site 1".into(),
            ));
        }
        self.surrogates.iter().try_for_each(|s| s.validate())
    }

    pub fn total_unlabeled(&self) -> usize {
        self.n_m.iter().sum()
    }
}

pub fn beta0_template(p: usize) -> Vec<f64> {
    let mut b = vec![0.0; p];
    for (dst, src) in b.iter_mut().zip(BETA0_TEMPLATE) {
        *dst = src;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Covariates = 0,
    Outcome = 1,
    Surrogate = 2,
}

/// Independent generator for one `(replication, site, stream)` triple.
/// Sites are numbered from one.
pub fn sub_rng(seed: u64, replication: usize, site: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((replication as u64) << 24) | ((site as u64) << 8) | stream as u64);
    rng
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(0.0)
}

/// `X = log(X̃ + 1)` with `X̃_ij = W_i + Z_ij`, `W_i ~ Poisson(ρμ)`,
/// `Z_ij ~ Poisson((1−ρ)μ)`.
pub fn gen_covariates(cfg: &SimConfig, rows: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    gen_raw_counts(cfg, rows, rng).mapv(|v| (v + 1.0).ln())
}

/// The untransformed counts `X̃`.
pub fn gen_raw_counts(cfg: &SimConfig, rows: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = cfg.rho * cfg.covariate_mean;
    let b = cfg.covariate_mean - a;
    let mut x = Array2::<f64>::zeros((rows, cfg.p));
    for i in 0..rows {
        let w = poisson(rng, a);
        for j in 0..cfg.p {
            x[[i, j]] = w + poisson(rng, b);
        }
    }
    x
}

/// Bernoulli draws with probability `g(β₀'X_i)`; the linear predictor is
/// clipped to ±50.
pub fn gen_outcome(
    x: ArrayView2<'_, f64>,
    beta0: ArrayView1<'_, f64>,
    rng: &mut ChaCha8Rng,
) -> Array1<f64> {
    x.dot(&beta0).mapv(|eta| {
        let prob = sigmoid(eta.clamp(-50.0, 50.0));
        if rng.random::<f64>() < prob {
            1.0
        } else {
            0.0
        }
    })
}

pub fn gen_surrogate(y: ArrayView1<'_, f64>, law: &SurrogateLaw, rng: &mut ChaCha8Rng) -> Array1<f64> {
    y.mapv(|yi| match *law {
        SurrogateLaw::Poisson { mu1, mu0 } => poisson(rng, if yi == 1.0 { mu1 } else { mu0 }),
        SurrogateLaw::Bernoulli { nu1, nu0 } => {
            let r = if yi == 1.0 { nu1 } else { nu0 };
            if rng.random::<f64>() < r {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// One simulated replication. Site 1 exposes labels on its first `n` rows;
/// `truth` keeps every site's full outcome vector for evaluation only.
#[derive(Debug, Clone)]
pub struct SimReplication {
    pub sites: Vec<Dataset>,
    pub truth: Vec<Array1<f64>>,
    pub replication: usize,
}

impl SimReplication {
    /// Site 1's labeled rows.
    pub fn labeled(&self) -> Result<Dataset> {
        self.sites[0].labeled()
    }
}

pub fn gen_experiment(cfg: &SimConfig, replication: usize) -> Result<SimReplication> {
    cfg.validate()?;
    let beta0 = Array1::from(cfg.beta0.clone());
    let mut sites = Vec::with_capacity(cfg.m);
    let mut truth = Vec::with_capacity(cfg.m);
    for site in 1..=cfg.m {
        let rows = cfg.n_m[site - 1];
        let x = gen_covariates(
            cfg,
            rows,
            &mut sub_rng(cfg.seed, replication, site, Stream::Covariates),
        );
        let y = gen_outcome(
            x.view(),
            beta0.view(),
            &mut sub_rng(cfg.seed, replication, site, Stream::Outcome),
        );
        let s = gen_surrogate(
            y.view(),
            &cfg.surrogates[site - 1],
            &mut sub_rng(cfg.seed, replication, site, Stream::Surrogate),
        );
        let observed = (site == 1).then(|| y.slice(ndarray::s![..cfg.n]).to_owned());
        sites.push(Dataset::new(x, s, observed, site)?);
        truth.push(y);
    }
    Ok(SimReplication {
        sites,
        truth,
        replication,
    })
}
