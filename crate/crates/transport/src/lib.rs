//! Summary-only wire protocol for federated fits.
//!
//! Sites never send anything whose size depends on their row count: the
//! codec's schema check pins every numeric payload to a length determined by
//! `p`, and the coordinator decodes every reply against its own `p`.

pub mod codec;
pub mod coordinator;
pub mod error;
pub mod manifest;
pub mod site;
pub mod transport;

pub use codec::{decode, encode, Kind, Message};
pub use coordinator::{coordinate, CoordinatorConfig, CoordinatorOutput};
pub use error::{FrameError, FrameErrorKind, TransportError};
pub use manifest::{config_hash, run_coordinator, run_site, Endpoint, RunManifest, SiteEndpoint};
pub use site::SiteWorker;
pub use transport::{FileDrop, InProcess, Tcp, Transport};
