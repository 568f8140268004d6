//! Length-prefixed binary frames.
//!
//! Layout: `SASH` magic, version byte, kind byte, payload length as u64 LE,
//! payload. Numeric payloads are little-endian f64; symmetric matrices are
//! stored as the packed upper triangle in row order. Every payload length is
//! a function of `p` alone.

use ndarray::{Array1, Array2};
use sash_core::federation::SiteSummary;

use crate::error::{FrameError, FrameErrorKind};

pub const MAGIC: [u8; 4] = *b"SASH";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8;
/// Longest accepted error text.
pub const MAX_ERROR_TEXT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    InitBroadcast = 1,
    SummaryUpload = 2,
    GammaBroadcast = 3,
    Ack = 4,
    ErrorReport = 5,
}

impl Kind {
    fn from_byte(b: u8) -> Option<Kind> {
        Some(match b {
            1 => Kind::InitBroadcast,
            2 => Kind::SummaryUpload,
            3 => Kind::GammaBroadcast,
            4 => Kind::Ack,
            5 => Kind::ErrorReport,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Supervised direction plus the labeled sample size the sites need for
    /// their penalty schedule.
    InitBroadcast { n_labeled: usize, gamma: Array1<f64> },
    SummaryUpload(SiteSummary),
    /// Direction for the extra round.
    GammaBroadcast { gamma: Array1<f64> },
    Ack,
    ErrorReport(String),
}

impl Message {
    pub fn kind(&self) -> Kind {
        match self {
            Message::InitBroadcast { .. } => Kind::InitBroadcast,
            Message::SummaryUpload(_) => Kind::SummaryUpload,
            Message::GammaBroadcast { .. } => Kind::GammaBroadcast,
            Message::Ack => Kind::Ack,
            Message::ErrorReport(_) => Kind::ErrorReport,
        }
    }
}

/// Payload bytes of a frame of `kind` for `p` covariates; `None` for the
/// variable-length error text.
pub fn payload_len(kind: Kind, p: usize) -> Option<usize> {
    Some(
        8 * match kind {
            Kind::InitBroadcast => p + 1,
            Kind::SummaryUpload => p * (p + 1) / 2 + p + 3,
            Kind::GammaBroadcast => p,
            Kind::Ack => 0,
            Kind::ErrorReport => return None,
        },
    )
}

fn put(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    match msg {
        Message::InitBroadcast { n_labeled, gamma } => {
            put(&mut payload, *n_labeled as f64);
            gamma.iter().for_each(|&v| put(&mut payload, v));
        }
        Message::SummaryUpload(s) => {
            put(&mut payload, s.site_id as f64);
            put(&mut payload, s.n_m as f64);
            put(&mut payload, s.sigma2);
            s.omega_xs.iter().for_each(|&v| put(&mut payload, v));
            let p = s.p();
            for i in 0..p {
                for j in i..p {
                    put(&mut payload, s.omega_xx[[i, j]]);
                }
            }
        }
        Message::GammaBroadcast { gamma } => gamma.iter().for_each(|&v| put(&mut payload, v)),
        Message::Ack => {}
        Message::ErrorReport(text) => {
            let mut end = text.len().min(MAX_ERROR_TEXT);
            while !text.is_char_boundary(end) {
                end -= 1;
            }
            payload.extend_from_slice(&text.as_bytes()[..end]);
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind() as u8);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parsed header: kind and payload length.
pub fn decode_header(bytes: &[u8]) -> Result<(Kind, usize), FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::new(
            bytes.len(),
            FrameErrorKind::Truncated {
                missing: HEADER_LEN - bytes.len(),
            },
        ));
    }
    if bytes[..4] != MAGIC {
        return Err(FrameError::new(0, FrameErrorKind::BadMagic));
    }
    if bytes[4] != VERSION {
        return Err(FrameError::new(4, FrameErrorKind::BadVersion(bytes[4])));
    }
    let kind = Kind::from_byte(bytes[5]).ok_or(FrameError::new(5, FrameErrorKind::UnknownKind(bytes[5])))?;
    let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 header bytes"));
    let len = usize::try_from(len).map_err(|_| FrameError::new(6, FrameErrorKind::Oversized(len)))?;
    Ok((kind, len))
}

fn floats(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn count(v: f64, offset: usize, what: &str) -> Result<usize, FrameError> {
    if v >= 0.0 && v.fract() == 0.0 && v <= (1u64 << 53) as f64 {
        Ok(v as usize)
    } else {
        Err(FrameError::new(
            offset,
            FrameErrorKind::Schema(format!("{what} must be a non-negative integer, got {v}")),
        ))
    }
}

/// `p` implied by a summary payload of `bytes` bytes, if any.
pub fn summary_p(bytes: usize) -> Option<usize> {
    if !bytes.is_multiple_of(8) || bytes < 24 {
        return None;
    }
    let k = bytes / 8 - 3;
    // p(p+1)/2 + p = k  ⇔  p² + 3p − 2k = 0
    let p = (((9 + 8 * k) as f64).sqrt() as usize).saturating_sub(3) / 2;
    (p.saturating_sub(1)..=p + 1).find(|&q| q * (q + 1) / 2 + q == k)
}

/// Decodes one complete frame. With `expected_p`, every numeric payload must
/// have exactly the length that `p` implies; this is the schema guard that
/// keeps anything sized by a site's row count off the wire.
pub fn decode(bytes: &[u8], expected_p: Option<usize>) -> Result<Message, FrameError> {
    let (kind, len) = decode_header(bytes)?;
    let have = bytes.len() - HEADER_LEN;
    if have < len {
        return Err(FrameError::new(
            bytes.len(),
            FrameErrorKind::Truncated { missing: len - have },
        ));
    }
    if have > len {
        return Err(FrameError::new(
            HEADER_LEN + len,
            FrameErrorKind::TrailingBytes(have - len),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let schema = |msg: String| FrameError::new(HEADER_LEN, FrameErrorKind::Schema(msg));
    let p = match (kind, expected_p) {
        (Kind::Ack | Kind::ErrorReport, _) => 0,
        (_, Some(p)) => {
            let want = payload_len(kind, p).expect("fixed-size kind");
            if len != want {
                return Err(schema(format!(
                    "{kind:?} payload is {len} bytes but p = {p} requires {want}"
                )));
            }
            p
        }
        (Kind::InitBroadcast, None) if len >= 8 && len % 8 == 0 => len / 8 - 1,
        (Kind::GammaBroadcast, None) if len % 8 == 0 => len / 8,
        (Kind::SummaryUpload, None) => summary_p(len)
            .ok_or_else(|| schema(format!("{len} bytes is not a summary payload for any p")))?,
        _ => return Err(schema(format!("{kind:?} payload of {len} bytes"))),
    };
    Ok(match kind {
        Kind::InitBroadcast => {
            let v = floats(payload);
            let n_labeled = count(v[0], HEADER_LEN, "labeled sample size")?;
            Message::InitBroadcast {
                n_labeled,
                gamma: Array1::from(v[1..].to_vec()),
            }
        }
        Kind::GammaBroadcast => Message::GammaBroadcast {
            gamma: Array1::from(floats(payload)),
        },
        Kind::SummaryUpload => {
            let v = floats(payload);
            let site_id = count(v[0], HEADER_LEN, "site id")?;
            let n_m = count(v[1], HEADER_LEN + 8, "site row count")?;
            let omega_xs = Array1::from(v[3..3 + p].to_vec());
            let mut omega_xx = Array2::zeros((p, p));
            let mut at = 3 + p;
            for i in 0..p {
                for j in i..p {
                    omega_xx[[i, j]] = v[at];
                    omega_xx[[j, i]] = v[at];
                    at += 1;
                }
            }
            Message::SummaryUpload(SiteSummary {
                site_id,
                n_m,
                omega_xx,
                omega_xs,
                sigma2: v[2],
                gamma_local: None,
            })
        }
        Kind::Ack => {
            if len != 0 {
                return Err(schema(format!("Ack carries {len} payload bytes")));
            }
            Message::Ack
        }
        Kind::ErrorReport => {
            if len > MAX_ERROR_TEXT {
                return Err(schema(format!("error text of {len} bytes exceeds {MAX_ERROR_TEXT}")));
            }
            Message::ErrorReport(String::from_utf8_lossy(payload).into_owned())
        }
    })
}

/// Reads exactly one frame from a stream.
pub fn read_frame(r: &mut impl std::io::Read) -> Result<Vec<u8>, crate::error::TransportError> {
    let mut buf = vec![0u8; HEADER_LEN];
    r.read_exact(&mut buf)?;
    let (kind, len) = decode_header(&buf)?;
    if let Some(max) = max_payload(kind) {
        if len > max {
            return Err(FrameError::new(6, FrameErrorKind::Oversized(len as u64)).into());
        }
    }
    buf.resize(HEADER_LEN + len, 0);
    r.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(buf)
}

// Refuse to allocate for absurd lengths before the schema check sees them.
fn max_payload(kind: Kind) -> Option<usize> {
    match kind {
        Kind::ErrorReport => Some(MAX_ERROR_TEXT),
        Kind::Ack => Some(0),
        _ => payload_len(Kind::SummaryUpload, 20_000),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_p_inverts_payload_len() {
        for p in 0..400 {
            let len = payload_len(Kind::SummaryUpload, p).unwrap();
            assert_eq!(summary_p(len), Some(p), "p = {p}");
        }
        assert_eq!(summary_p(8 * 4), None);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Message::Ack);
        assert_eq!(bytes, [b'S', b'A', b'S', b'H', 1, 4, 0, 0, 0, 0, 0, 0, 0, 0]);
    }
}
