//! Run manifests: who the sites are, how to reach them, and which pipeline
//! configuration everyone agreed on.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sash_core::federation::SashConfig;
use sash_core::Dataset;

use crate::coordinator::{coordinate, CoordinatorConfig, CoordinatorOutput};
use crate::error::{Result, TransportError};
use crate::site::SiteWorker;
use crate::transport::{serve_files, serve_tcp, FileDrop, Tcp, Transport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "snake_case")]
pub enum Endpoint {
    Tcp { address: String },
    Files { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteEndpoint {
    pub site_id: usize,
    #[serde(flatten)]
    pub endpoint: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    /// Hex SHA-256 of the canonical JSON of the pipeline's [`SashConfig`].
    pub config_hash: String,
    pub sites: Vec<SiteEndpoint>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// SHA-256 over the JSON form of `value` with object keys sorted.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value).map_err(|e| TransportError::Manifest(e.to_string()))?;
    let bytes = serde_json::to_vec(&canonical).map_err(|e| TransportError::Manifest(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(experiment_id: &str, cfg: &SashConfig, sites: Vec<SiteEndpoint>, out_dir: &Path) -> Result<Self> {
        Ok(Self {
            experiment_id: experiment_id.to_string(),
            config_hash: config_hash(cfg)?,
            sites,
            seeds: Vec::new(),
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| TransportError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn verify(&self, cfg: &SashConfig) -> Result<()> {
        let h = config_hash(cfg)?;
        if h != self.config_hash {
            return Err(TransportError::Manifest(format!(
                "config hash {h} does not match the manifest's {}",
                self.config_hash
            )));
        }
        let mut ids: Vec<usize> = self.sites.iter().map(|s| s.site_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TransportError::Manifest("duplicate site id".into()));
        }
        Ok(())
    }

    fn endpoint(&self, site_id: usize) -> Result<&Endpoint> {
        self.sites
            .iter()
            .find(|s| s.site_id == site_id)
            .map(|s| &s.endpoint)
            .ok_or_else(|| TransportError::Manifest(format!("site {site_id} is not in the manifest")))
    }

    /// Opens the transport the manifest describes; all sites must use the
    /// same kind.
    pub fn open(&self, timeout: Duration) -> Result<Box<dyn Transport>> {
        let tcp: Vec<(usize, String)> = self
            .sites
            .iter()
            .filter_map(|s| match &s.endpoint {
                Endpoint::Tcp { address } => Some((s.site_id, address.clone())),
                _ => None,
            })
            .collect();
        let files: Vec<(usize, PathBuf)> = self
            .sites
            .iter()
            .filter_map(|s| match &s.endpoint {
                Endpoint::Files { dir } => Some((s.site_id, dir.clone())),
                _ => None,
            })
            .collect();
        match (tcp.is_empty(), files.is_empty()) {
            (false, true) => Ok(Box::new(Tcp::connect(&tcp, timeout)?)),
            (true, false) => Ok(Box::new(FileDrop::new(files)?)),
            (true, true) => Err(TransportError::Manifest("no sites".into())),
            (false, false) => Err(TransportError::Manifest("mixed transports are not supported".into())),
        }
    }
}

/// Coordinator entry point: verifies the configuration against the manifest,
/// connects to every site and runs the fit.
pub fn run_coordinator(manifest: &RunManifest, labeled: &Dataset, cfg: &CoordinatorConfig) -> Result<CoordinatorOutput> {
    manifest.verify(&cfg.sash)?;
    manifest.endpoint(labeled.site_id())?;
    let timeout = Duration::from_secs_f64(cfg.timeout_secs);
    let mut transport = manifest.open(timeout)?;
    coordinate(labeled, cfg, transport.as_mut())
}

/// Site entry point: serves `data` at this site's endpoint until the
/// coordinator closes the run, waiting at most `timeout` for each message
/// when exchanging files.
pub fn run_site(manifest: &RunManifest, data: Dataset, cfg: &SashConfig, timeout: Duration) -> Result<()> {
    manifest.verify(cfg)?;
    let site = data.site_id();
    let endpoint = manifest.endpoint(site)?.clone();
    let worker = SiteWorker::new(data, cfg.site.clone());
    match endpoint {
        Endpoint::Tcp { address } => {
            let listener = TcpListener::bind(&address)?;
            log::info!("site {site} listening on {address}");
            serve_tcp(&listener, &worker)
        }
        Endpoint::Files { dir } => serve_files(&dir, &worker, timeout),
    }
}
