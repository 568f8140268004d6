//! Coordinator-side transports. Each one delivers a frame to every site and
//! collects exactly one reply per site (barrier semantics); replies are
//! returned keyed by site id, so arrival order is irrelevant.

use std::collections::BTreeMap;
use std::fs;
use std::io::{ErrorKind, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::codec::{encode, read_frame, Message};
use crate::error::{Result, TransportError};
use crate::site::SiteWorker;

/// One reply per site, or the reason it is missing.
pub type Replies = BTreeMap<usize, Result<Vec<u8>>>;

pub trait Transport {
    /// Site ids this transport talks to.
    fn sites(&self) -> Vec<usize>;

    /// Sends `frame` to every site and waits up to `timeout` for each reply.
    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Replies>;

    /// Tells every site the run is over.
    fn close(&mut self, timeout: Duration) -> Result<()> {
        let ack = encode(&Message::Ack);
        for (site, r) in self.exchange(&ack, timeout)? {
            if let Err(e) = r {
                log::warn!("site {site} did not acknowledge shutdown: {e}");
            }
        }
        Ok(())
    }
}

const POLL: Duration = Duration::from_millis(20);

// ---------------------------------------------------------------- in-process

struct Peer {
    site: usize,
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    handle: Option<JoinHandle<()>>,
}

/// Sites running on threads of this process, talking through byte channels.
/// Every message still goes through the codec.
pub struct InProcess {
    peers: Vec<Peer>,
}

impl InProcess {
    pub fn spawn(workers: Vec<SiteWorker>) -> Self {
        let peers = workers
            .into_iter()
            .map(|w| {
                let site = w.site_id();
                let (to_site, site_rx) = mpsc::channel::<Vec<u8>>();
                let (site_tx, from_site) = mpsc::channel::<Vec<u8>>();
                let handle = thread::Builder::new()
                    .name(format!("site-{site}"))
                    .spawn(move || {
                        while let Ok(frame) = site_rx.recv() {
                            let (reply, more) = w.handle_bytes(&frame);
                            if site_tx.send(reply).is_err() || !more {
                                break;
                            }
                        }
                    })
                    .expect("spawn site thread");
                Peer {
                    site,
                    tx: to_site,
                    rx: from_site,
                    handle: Some(handle),
                }
            })
            .collect();
        Self { peers }
    }
}

impl Transport for InProcess {
    fn sites(&self) -> Vec<usize> {
        self.peers.iter().map(|p| p.site).collect()
    }

    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Replies> {
        for p in &self.peers {
            // a closed channel shows up as a missing reply below
            let _ = p.tx.send(frame.to_vec());
        }
        let deadline = Instant::now() + timeout;
        let mut out = Replies::new();
        for p in &self.peers {
            let left = deadline.saturating_duration_since(Instant::now());
            let r = p.rx.recv_timeout(left).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => TransportError::Timeout {
                    site: p.site,
                    secs: timeout.as_secs_f64(),
                },
                mpsc::RecvTimeoutError::Disconnected => TransportError::Protocol {
                    site: p.site,
                    message: "site thread exited".into(),
                },
            });
            out.insert(p.site, r);
        }
        Ok(out)
    }
}

impl Drop for InProcess {
    fn drop(&mut self) {
        for p in &mut self.peers {
            let (tx, _) = mpsc::channel();
            drop(std::mem::replace(&mut p.tx, tx));
            if let Some(h) = p.handle.take() {
                let _ = h.join();
            }
        }
    }
}

// ----------------------------------------------------------------------- tcp

/// One persistent connection per site.
pub struct Tcp {
    conns: Vec<(usize, TcpStream)>,
}

impl Tcp {
    /// Connects to every `(site, address)`, retrying until `timeout` so sites
    /// may start after the coordinator.
    pub fn connect(endpoints: &[(usize, String)], timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        let mut conns = Vec::with_capacity(endpoints.len());
        for (site, addr) in endpoints {
            let stream = loop {
                let attempt = addr
                    .to_socket_addrs()
                    .and_then(|mut a| a.next().ok_or_else(|| ErrorKind::AddrNotAvailable.into()))
                    .and_then(|a| TcpStream::connect_timeout(&a, POLL.max(Duration::from_secs(1))));
                match attempt {
                    Ok(s) => break s,
                    Err(_) if Instant::now() < deadline => thread::sleep(POLL),
                    Err(e) => {
                        return Err(TransportError::Protocol {
                            site: *site,
                            message: format!("cannot connect to {addr}: {e}"),
                        })
                    }
                }
            };
            stream.set_nodelay(true)?;
            conns.push((*site, stream));
        }
        Ok(Self { conns })
    }
}

fn tcp_round(stream: &mut TcpStream, frame: &[u8], deadline: Instant, site: usize, timeout: Duration) -> Result<Vec<u8>> {
    stream.write_all(frame)?;
    stream.flush()?;
    let left = deadline.saturating_duration_since(Instant::now());
    stream.set_read_timeout(Some(left.max(Duration::from_millis(1))))?;
    read_frame(stream).map_err(|e| match e {
        TransportError::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            TransportError::Timeout {
                site,
                secs: timeout.as_secs_f64(),
            }
        }
        other => other.at_site(site),
    })
}

impl Transport for Tcp {
    fn sites(&self) -> Vec<usize> {
        self.conns.iter().map(|c| c.0).collect()
    }

    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Replies> {
        let deadline = Instant::now() + timeout;
        let replies = thread::scope(|s| {
            let handles: Vec<_> = self
                .conns
                .iter_mut()
                .map(|(site, stream)| {
                    let site = *site;
                    (site, s.spawn(move || tcp_round(stream, frame, deadline, site, timeout)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(site, h)| (site, h.join().expect("connection thread panicked")))
                .collect::<Replies>()
        });
        Ok(replies)
    }
}

/// Serves one coordinator connection on `listener` until the run is closed.
pub fn serve_tcp(listener: &TcpListener, worker: &SiteWorker) -> Result<()> {
    let (mut stream, peer) = listener.accept()?;
    log::info!("site {}: coordinator connected from {peer}", worker.site_id());
    stream.set_nodelay(true)?;
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(TransportError::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let (reply, more) = worker.handle_bytes(&frame);
        stream.write_all(&reply)?;
        stream.flush()?;
        if !more {
            return Ok(());
        }
    }
}

// ----------------------------------------------------------------- file drop

/// Exchange through a shared directory. Round `r` for site `m` is the pair
/// `site-m/to-site-r.sash` and `site-m/from-site-r.sash`; files appear
/// atomically via rename.
pub struct FileDrop {
    sites: Vec<(usize, PathBuf)>,
    round: usize,
}

pub fn site_dir(root: &Path, site: usize) -> PathBuf {
    root.join(format!("site-{site}"))
}

fn to_site(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("to-site-{round}.sash"))
}

fn from_site(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("from-site-{round}.sash"))
}

fn drop_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn await_file(path: &Path, deadline: Instant) -> Option<Vec<u8>> {
    loop {
        match fs::read(path) {
            Ok(b) => return Some(b),
            Err(_) if Instant::now() < deadline => thread::sleep(POLL),
            Err(_) => return None,
        }
    }
}

impl FileDrop {
    /// `(site, directory)` pairs; directories are created if missing.
    pub fn new(sites: Vec<(usize, PathBuf)>) -> Result<Self> {
        for (_, d) in &sites {
            fs::create_dir_all(d)?;
        }
        Ok(Self { sites, round: 0 })
    }

    /// All sites under one root, in `root/site-<id>`.
    pub fn under(root: &Path, sites: &[usize]) -> Result<Self> {
        Self::new(sites.iter().map(|&s| (s, site_dir(root, s))).collect())
    }
}

impl Transport for FileDrop {
    fn sites(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.0).collect()
    }

    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Replies> {
        let round = self.round;
        self.round += 1;
        for (_, dir) in &self.sites {
            drop_file(&to_site(dir, round), frame)?;
        }
        let deadline = Instant::now() + timeout;
        let mut out = Replies::new();
        for (site, dir) in &self.sites {
            let r = await_file(&from_site(dir, round), deadline).ok_or(TransportError::Timeout {
                site: *site,
                secs: timeout.as_secs_f64(),
            });
            out.insert(*site, r);
        }
        Ok(out)
    }
}

/// Serves a site from its drop directory until the run is closed, waiting at
/// most `timeout` for each incoming message.
pub fn serve_files(dir: &Path, worker: &SiteWorker, timeout: Duration) -> Result<()> {
    fs::create_dir_all(dir)?;
    for round in 0.. {
        let frame = await_file(&to_site(dir, round), Instant::now() + timeout).ok_or(
            TransportError::Timeout {
                site: worker.site_id(),
                secs: timeout.as_secs_f64(),
            },
        )?;
        let (reply, more) = worker.handle_bytes(&frame);
        drop_file(&from_site(dir, round), &reply)?;
        if !more {
            break;
        }
    }
    Ok(())
}
