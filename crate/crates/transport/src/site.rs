//! The site side of the protocol: answers broadcasts with summaries computed
//! from data that never leaves the process.

use sash_core::federation::{site_fit, site_summary_at, SiteFitOptions, SiteSummary};
use sash_core::{CoefficientVector, Dataset, Result as CoreResult};

use crate::codec::{decode, encode, Message};

pub struct SiteWorker {
    data: Dataset,
    opts: SiteFitOptions,
}

impl SiteWorker {
    pub fn new(data: Dataset, opts: SiteFitOptions) -> Self {
        Self { data, opts }
    }

    pub fn site_id(&self) -> usize {
        self.data.site_id()
    }

    pub fn p(&self) -> usize {
        self.data.p()
    }

    fn strip(mut s: SiteSummary) -> SiteSummary {
        s.gamma_local = None;
        s
    }

    fn local_round(&self, n_labeled: usize, gamma: Vec<f64>) -> CoreResult<SiteSummary> {
        let g = CoefficientVector::direction(gamma.into())?;
        let (_, summary) = site_fit(&self.data, &g, n_labeled, &self.opts)?;
        Ok(Self::strip(summary))
    }

    fn extra_round(&self, gamma: Vec<f64>) -> CoreResult<SiteSummary> {
        let g = CoefficientVector::direction(gamma.into())?;
        let k = self.opts.kernel_for(&self.data)?;
        let s = site_summary_at(&self.data, &g, &k, self.opts.weights_for(&self.data))?;
        Ok(Self::strip(s))
    }

    /// Reply to one message; `None` once the coordinator has closed the run.
    pub fn handle(&self, msg: Message) -> Option<Message> {
        let result = match msg {
            Message::InitBroadcast { n_labeled, gamma } => self.local_round(n_labeled, gamma.to_vec()),
            Message::GammaBroadcast { gamma } => self.extra_round(gamma.to_vec()),
            Message::Ack => return None,
            other => {
                return Some(Message::ErrorReport(format!(
                    "site {} cannot handle {:?}",
                    self.site_id(),
                    other.kind()
                )))
            }
        };
        Some(match result {
            Ok(s) => Message::SummaryUpload(s),
            Err(e) => {
                log::warn!("site {}: {e}", self.site_id());
                Message::ErrorReport(e.to_string())
            }
        })
    }

    /// Byte-level [`handle`](Self::handle): decode against this site's `p`,
    /// answer, encode. A final `Ack` is echoed so the coordinator can confirm
    /// shutdown; the flag says whether to keep serving.
    pub fn handle_bytes(&self, frame: &[u8]) -> (Vec<u8>, bool) {
        match decode(frame, Some(self.p())) {
            Ok(msg) => match self.handle(msg) {
                Some(reply) => (encode(&reply), true),
                None => (encode(&Message::Ack), false),
            },
            Err(e) => (encode(&Message::ErrorReport(e.to_string())), true),
        }
    }
}
