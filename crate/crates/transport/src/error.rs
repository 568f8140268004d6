use sash_core::SashError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameErrorKind {
    BadMagic,
    BadVersion(u8),
    UnknownKind(u8),
    Truncated { missing: usize },
    TrailingBytes(usize),
    Oversized(u64),
    Schema(String),
}

/// Malformed or schema-violating frame; `offset` is the byte position at
/// which decoding gave up.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("frame error at byte {offset}: {}", describe(.kind))]
pub struct FrameError {
    pub offset: usize,
    pub kind: FrameErrorKind,
}

fn describe(k: &FrameErrorKind) -> String {
    match k {
        FrameErrorKind::BadMagic => "bad magic (expected `SASH`)".into(),
        FrameErrorKind::BadVersion(v) => format!("unsupported version {v}"),
        FrameErrorKind::UnknownKind(b) => format!("unknown message kind {b}"),
        FrameErrorKind::Truncated { missing } => format!("truncated, {missing} bytes missing"),
        FrameErrorKind::TrailingBytes(n) => format!("{n} trailing bytes after payload"),
        FrameErrorKind::Oversized(n) => format!("declared payload of {n} bytes is too large"),
        FrameErrorKind::Schema(m) => format!("schema violation: {m}"),
    }
}

impl FrameError {
    pub fn new(offset: usize, kind: FrameErrorKind) -> Self {
        Self { offset, kind }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Frame(#[from] FrameError),

    #[error("site {site}: {source}")]
    SiteFrame {
        site: usize,
        #[source]
        source: FrameError,
    },

    #[error("site {site}: protocol violation: {message}")]
    Protocol { site: usize, message: String },

    #[error("site {site} reported an error: {message}")]
    Remote { site: usize, message: String },

    #[error("site {site} timed out after {secs:.1} s")]
    Timeout { site: usize, secs: f64 },

    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Core(#[from] SashError),
}

impl TransportError {
    pub fn at_site(self, site: usize) -> Self {
        match self {
            TransportError::Frame(source) => TransportError::SiteFrame { site, source },
            other => other,
        }
    }

    /// Whether the failure is in the protocol layer rather than in the data
    /// or the numerics.
    pub fn is_protocol(&self) -> bool {
        !matches!(self, TransportError::Core(_))
    }
}

pub type Result<T> = std::result::Result<T, TransportError>;
