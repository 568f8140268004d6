//! The coordinator: supervised initialization on the labeled site, one
//! broadcast/summary round, aggregation, and optionally the extra round.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use sash_core::federation::{step1_supervised_init, step3, Broadcast, SashConfig, SiteSummary, Step1Fit, Step3Output};
use sash_core::{Dataset, FitResult};

use crate::codec::{decode, encode, Message};
use crate::error::{Result, TransportError};
use crate::transport::{Replies, Transport};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    pub sash: SashConfig,
    pub sash_plus: bool,
    /// Per-site wait for each reply, in seconds.
    pub timeout_secs: f64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            sash: SashConfig::default(),
            sash_plus: false,
            timeout_secs: DEFAULT_TIMEOUT.as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinatorOutput {
    pub step1: Step1Fit,
    pub summaries: Vec<SiteSummary>,
    pub base: Step3Output,
    pub plus: Option<Step3Output>,
}

impl CoordinatorOutput {
    /// The final estimate: the extra round's when it ran.
    pub fn fit(&self) -> &FitResult {
        &self.plus.as_ref().unwrap_or(&self.base).fit
    }
}

/// Decodes one round of replies into summaries keyed by site id. Failures
/// abort the run naming the site, except that with `allow_partial` a remote
/// site (not `labeled_site`) may drop out.
fn collect(replies: Replies, p: usize, allow_partial: bool, labeled_site: usize) -> Result<Vec<SiteSummary>> {
    let mut got: BTreeMap<usize, SiteSummary> = BTreeMap::new();
    for (site, reply) in replies {
        let outcome = reply.and_then(|bytes| {
            let msg = decode(&bytes, Some(p)).map_err(|e| TransportError::SiteFrame { site, source: e })?;
            match msg {
                Message::SummaryUpload(s) if s.site_id == site => {
                    s.validate()?;
                    Ok(s)
                }
                Message::SummaryUpload(s) => Err(TransportError::Protocol {
                    site,
                    message: format!("summary claims to come from site {}", s.site_id),
                }),
                Message::ErrorReport(message) => Err(TransportError::Remote { site, message }),
                other => Err(TransportError::Protocol {
                    site,
                    message: format!("expected a summary, got {:?}", other.kind()),
                }),
            }
        });
        match outcome {
            Ok(s) => {
                if got.insert(site, s).is_some() {
                    return Err(TransportError::Protocol {
                        site,
                        message: "duplicate summary".into(),
                    });
                }
            }
            Err(e) if allow_partial && site != labeled_site => log::warn!("excluding site {site}: {e}"),
            Err(e) => return Err(e),
        }
    }
    if !got.contains_key(&labeled_site) {
        return Err(TransportError::Protocol {
            site: labeled_site,
            message: "the labeled site is not served by this transport".into(),
        });
    }
    Ok(got.into_values().collect())
}

/// Runs the whole federated fit over `transport`. `labeled` is the
/// coordinator's own site, which must also be one of the transport's sites.
pub fn coordinate(labeled: &Dataset, cfg: &CoordinatorConfig, transport: &mut dyn Transport) -> Result<CoordinatorOutput> {
    let timeout = Duration::from_secs_f64(cfg.timeout_secs);
    let sash = &cfg.sash;
    let p = labeled.p();
    let me = labeled.site_id();

    let step1 = step1_supervised_init(labeled, &sash.step1)?;
    let init = encode(&Message::InitBroadcast {
        n_labeled: labeled.n_labeled(),
        gamma: step1.gamma_sup.values().to_owned(),
    });
    log::info!("broadcasting initial direction to sites {:?}", transport.sites());
    let summaries = collect(transport.exchange(&init, timeout)?, p, sash.allow_partial, me)?;
    let base = step3(&summaries, labeled, sash)?;

    let plus = if cfg.sash_plus {
        let gamma = match sash.broadcast {
            Broadcast::Refined => &base.fit.gamma_dagger,
            Broadcast::Aggregated => &base.gamma_hat,
        };
        let frame = encode(&Message::GammaBroadcast {
            gamma: gamma.values().to_owned(),
        });
        let again = collect(transport.exchange(&frame, timeout)?, p, sash.allow_partial, me)?;
        Some(step3(&again, labeled, sash)?)
    } else {
        None
    };
    transport.close(timeout)?;
    Ok(CoordinatorOutput {
        step1,
        summaries,
        base,
        plus,
    })
}
