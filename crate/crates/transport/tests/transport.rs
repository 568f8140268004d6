use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use sash_core::federation::{run_sash, run_sash_plus};
use sash_core::simgen::{gen_experiment, SimConfig, Strength};
use sash_core::{Dataset, FitResult};
use sash_transport::codec::{encode, Kind, Message};
use sash_transport::error::TransportError;
use sash_transport::manifest::{run_coordinator, run_site};
use sash_transport::transport::{serve_files, site_dir, Replies};
use sash_transport::{
    coordinate, CoordinatorConfig, Endpoint, FileDrop, FrameErrorKind, InProcess, RunManifest, SiteEndpoint,
    SiteWorker, Transport,
};

fn sites(seed: u64) -> Vec<Dataset> {
    let mut sim = SimConfig::with_shape(Strength::Strong, 3, 100, 8, 200);
    sim.seed = seed;
    gen_experiment(&sim, 0).unwrap().sites
}

fn config(sash_plus: bool) -> CoordinatorConfig {
    CoordinatorConfig {
        sash_plus,
        timeout_secs: 120.0,
        ..CoordinatorConfig::default()
    }
}

fn workers(sites: &[Dataset], cfg: &CoordinatorConfig) -> Vec<SiteWorker> {
    sites
        .iter()
        .map(|d| SiteWorker::new(d.clone(), cfg.sash.site.clone()))
        .collect()
}

fn same_bits(a: &FitResult, b: &FitResult) {
    assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
    assert_eq!(a.beta1.to_bits(), b.beta1.to_bits());
    let bits = |f: &FitResult| f.beta_sash.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a), bits(b));
    assert_eq!(
        serde_json::to_string(&a.diagnostics).unwrap(),
        serde_json::to_string(&b.diagnostics).unwrap()
    );
}

#[test]
fn loopback_matches_library_bitwise() {
    let data = sites(11);
    let cfg = config(true);
    let lib = run_sash(&data, &cfg.sash).unwrap();
    let lib_plus = run_sash_plus(&data, &lib, &cfg.sash).unwrap();

    let mut t = InProcess::spawn(workers(&data, &cfg));
    let out = coordinate(&data[0], &cfg, &mut t).unwrap();
    same_bits(&out.base.fit, &lib.step3.fit);
    same_bits(&out.plus.as_ref().unwrap().fit, &lib_plus.fit);
    same_bits(out.fit(), &lib_plus.fit);
    assert_eq!(out.summaries.len(), 3);
    assert!(out.summaries.iter().all(|s| s.gamma_local.is_none()));
}

fn tcp_run(data: &[Dataset], cfg: &CoordinatorConfig) -> FitResult {
    let listeners: Vec<TcpListener> = data.iter().map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let endpoints = data
        .iter()
        .zip(&listeners)
        .map(|(d, l)| SiteEndpoint {
            site_id: d.site_id(),
            endpoint: Endpoint::Tcp {
                address: l.local_addr().unwrap().to_string(),
            },
        })
        .collect();
    let out_dir = tempfile::tempdir().unwrap();
    let manifest = RunManifest::new("tcp-test", &cfg.sash, endpoints, out_dir.path()).unwrap();
    // release the ports so the sites can bind them through the manifest
    drop(listeners);
    let handles: Vec<_> = data
        .iter()
        .map(|d| {
            let (m, d, c) = (manifest.clone(), d.clone(), cfg.clone());
            thread::spawn(move || run_site(&m, d, &c.sash, Duration::from_secs(120)))
        })
        .collect();
    let out = run_coordinator(&manifest, &data[0], cfg).unwrap();
    for h in handles {
        h.join().unwrap().unwrap();
    }
    out.fit().clone()
}

fn file_run(data: &[Dataset], cfg: &CoordinatorConfig) -> FitResult {
    let root = tempfile::tempdir().unwrap();
    let ids: Vec<usize> = data.iter().map(|d| d.site_id()).collect();
    let handles: Vec<_> = workers(data, cfg)
        .into_iter()
        .map(|w| {
            let dir = site_dir(root.path(), w.site_id());
            thread::spawn(move || serve_files(&dir, &w, Duration::from_secs(120)))
        })
        .collect();
    let mut t = FileDrop::under(root.path(), &ids).unwrap();
    let out = coordinate(&data[0], cfg, &mut t).unwrap();
    for h in handles {
        h.join().unwrap().unwrap();
    }
    out.fit().clone()
}

#[test]
fn tcp_and_file_drop_agree() {
    let data = sites(12);
    let cfg = config(true);
    let tcp = tcp_run(&data, &cfg);
    let files = file_run(&data, &cfg);
    same_bits(&tcp, &files);
    let lib = run_sash(&data, &cfg.sash).unwrap();
    same_bits(&tcp, &run_sash_plus(&data, &lib, &cfg.sash).unwrap().fit);
}

/// Replaces one site's reply with an upload carrying one float per row.
struct Leaky {
    inner: InProcess,
    site: usize,
    rows: usize,
}

impl Transport for Leaky {
    fn sites(&self) -> Vec<usize> {
        self.inner.sites()
    }

    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Replies, TransportError> {
        let mut replies = self.inner.exchange(frame, timeout)?;
        let mut bytes = b"SASH".to_vec();
        bytes.extend([1, Kind::SummaryUpload as u8]);
        bytes.extend_from_slice(&((8 * (self.rows + 3)) as u64).to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 8 * (self.rows + 3)));
        replies.insert(self.site, Ok(bytes));
        Ok(replies)
    }
}

#[test]
fn row_level_upload_is_rejected_naming_the_site() {
    let data = sites(13);
    let cfg = config(false);
    let rows = data[1].n_rows();
    let mut t = Leaky {
        inner: InProcess::spawn(workers(&data, &cfg)),
        site: data[1].site_id(),
        rows,
    };
    let err = coordinate(&data[0], &cfg, &mut t).unwrap_err();
    match err {
        TransportError::SiteFrame { site, source } => {
            assert_eq!(site, data[1].site_id());
            assert!(matches!(source.kind, FrameErrorKind::Schema(_)), "{source}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn silent_site_times_out() {
    let data = sites(14);
    let mut cfg = config(false);
    cfg.timeout_secs = 0.2;
    let root = tempfile::tempdir().unwrap();
    let ids: Vec<usize> = data.iter().map(|d| d.site_id()).collect();
    let mut t = FileDrop::under(root.path(), &ids).unwrap();
    match coordinate(&data[0], &cfg, &mut t).unwrap_err() {
        TransportError::Timeout { site, .. } => assert_eq!(site, ids[0]),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn site_errors_are_reported_back() {
    let data = sites(15);
    let cfg = config(false);
    let w = SiteWorker::new(data[1].clone(), cfg.sash.site.clone());
    // a direction of the wrong length never reaches the estimator
    let (reply, more) = w.handle_bytes(&encode(&Message::GammaBroadcast {
        gamma: ndarray::Array1::from(vec![1.0; 3]),
    }));
    assert!(more);
    assert!(matches!(
        sash_transport::decode(&reply, None).unwrap(),
        Message::ErrorReport(t) if t.contains("schema")
    ));
    // a zero anchor is rejected by the site itself
    let mut g = vec![0.0; data[1].p()];
    g[1] = 1.0;
    let (reply, _) = w.handle_bytes(&encode(&Message::GammaBroadcast { gamma: g.into() }));
    assert!(matches!(sash_transport::decode(&reply, None).unwrap(), Message::ErrorReport(_)));
}

#[test]
fn manifest_rejects_a_different_config() {
    let cfg = config(false);
    let dir = tempfile::tempdir().unwrap();
    let m = RunManifest::new(
        "x",
        &cfg.sash,
        vec![SiteEndpoint {
            site_id: 1,
            endpoint: Endpoint::Files { dir: dir.path().into() },
        }],
        dir.path(),
    )
    .unwrap();
    assert!(m.verify(&cfg.sash).is_ok());
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<RunManifest>(&json).unwrap(), m);
    let mut other = cfg.clone();
    other.sash.bic_grid += 1;
    assert!(matches!(m.verify(&other.sash), Err(TransportError::Manifest(_))));
}
