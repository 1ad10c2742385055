//! Byte layout of round envelopes.
//!
//! ```text
//! "FSIM" | u8 version | u8 kind | u32 round | u32 len | payload[len] | u32 crc
//! ```
//!
//! Integers and floats are little-endian; floats are raw IEEE-754 bits.
//! The CRC-32 covers the header and payload. Frames are checked in the
//! order magic, version, length, checksum, kind, payload, so a damaged
//! frame is never handed to the payload parser.

use fedsim_core::server::RoundContribution;
use fedsim_core::trainer::{Broadcast, ModelUpdate};
use fedsim_core::{Moments, ParamVector, SparseDelta};

use crate::{Result, WireError};

pub const MAGIC: [u8; 4] = *b"FSIM";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const TRAILER_LEN: usize = 4;
/// Frames announcing a larger payload are rejected before buffering.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgKind {
    Broadcast = 1,
    Contribution = 2,
    RoundDone = 3,
    Error = 4,
    Hello = 5,
}

impl MsgKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MsgKind::Broadcast,
            2 => MsgKind::Contribution,
            3 => MsgKind::RoundDone,
            4 => MsgKind::Error,
            5 => MsgKind::Hello,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// First frame on every connection; carries the client's id.
    Hello {
        client_id: u32,
    },
    Broadcast(Broadcast),
    Contribution(RoundContribution),
    /// The federation is over.
    RoundDone,
    Error(String),
}

impl Message {
    pub fn kind(&self) -> MsgKind {
        match self {
            Message::Hello { .. } => MsgKind::Hello,
            Message::Broadcast(_) => MsgKind::Broadcast,
            Message::Contribution(_) => MsgKind::Contribution,
            Message::RoundDone => MsgKind::RoundDone,
            Message::Error(_) => MsgKind::Error,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundEnvelope {
    pub version: u8,
    pub round: u32,
    pub message: Message,
}

impl RoundEnvelope {
    pub fn new(round: u32, message: Message) -> Self {
        RoundEnvelope {
            version: PROTOCOL_VERSION,
            round,
            message,
        }
    }

    pub fn kind(&self) -> MsgKind {
        self.message.kind()
    }
}

pub fn encode(envelope: &RoundEnvelope) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    write_payload(&mut payload, &envelope.message)?;
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::TooLarge(payload.len()).into());
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(envelope.version);
    out.push(envelope.kind() as u8);
    out.extend_from_slice(&envelope.round.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<RoundEnvelope> {
    decode_with_version(bytes, PROTOCOL_VERSION)
}

pub fn decode_with_version(bytes: &[u8], version: u8) -> Result<RoundEnvelope> {
    match decode_frame(bytes, version)? {
        None => Err(WireError::Truncated {
            needed: frame_len_hint(bytes),
            available: bytes.len(),
        }
        .into()),
        Some((env, used)) if used == bytes.len() => Ok(env),
        Some((_, used)) => Err(WireError::TrailingBytes(bytes.len() - used).into()),
    }
}

fn frame_len_hint(bytes: &[u8]) -> usize {
    if bytes.len() >= HEADER_LEN {
        HEADER_LEN + read_u32(&bytes[10..14]) as usize + TRAILER_LEN
    } else {
        HEADER_LEN
    }
}

/// Tries to decode the frame at the start of `buf`.
///
/// `Ok(None)` means the bytes so far are a valid but incomplete prefix.
pub fn decode_frame(buf: &[u8], version: u8) -> Result<Option<(RoundEnvelope, usize)>> {
    let magic_seen = buf.len().min(MAGIC.len());
    if buf[..magic_seen] != MAGIC[..magic_seen] {
        return Err(WireError::BadMagic.into());
    }
    if buf.len() > 4 && buf[4] != version {
        return Err(WireError::VersionMismatch {
            expected: version,
            found: buf[4],
        }
        .into());
    }
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = read_u32(&buf[10..14]) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len).into());
    }
    let total = HEADER_LEN + len + TRAILER_LEN;
    if buf.len() < total {
        return Ok(None);
    }
    let body = &buf[..HEADER_LEN + len];
    let sent = read_u32(&buf[HEADER_LEN + len..total]);
    let computed = crc32fast::hash(body);
    if sent != computed {
        return Err(WireError::Checksum { sent, computed }.into());
    }
    let kind = MsgKind::from_code(buf[5]).ok_or(WireError::UnknownKind(buf[5]))?;
    let round = read_u32(&buf[6..10]);
    let message = read_payload(kind, &buf[HEADER_LEN..HEADER_LEN + len])?;
    Ok(Some((
        RoundEnvelope {
            version,
            round,
            message,
        },
        total,
    )))
}

/// Incremental decoder for a byte stream carrying back-to-back frames.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    version: u8,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::with_version(PROTOCOL_VERSION)
    }

    pub fn with_version(version: u8) -> Self {
        FrameDecoder {
            buf: Vec::new(),
            version,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet decoded.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    pub fn next_frame(&mut self) -> Result<Option<RoundEnvelope>> {
        match decode_frame(&self.buf, self.version)? {
            None => Ok(None),
            Some((env, used)) => {
                self.buf.drain(..used);
                Ok(Some(env))
            }
        }
    }
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().expect("four bytes"))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| WireError::Malformed(format!("{what} does not fit in u32")).into())
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &ParamVector) {
    for x in xs.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_moments(out: &mut Vec<u8>, moments: &Option<Moments>) {
    match moments {
        None => out.push(0),
        Some(mo) => {
            out.push(1);
            put_f64s(out, &mo.m);
            put_f64s(out, &mo.v);
        }
    }
}

fn write_payload(out: &mut Vec<u8>, message: &Message) -> Result<()> {
    match message {
        Message::Hello { client_id } => put_u32(out, *client_id),
        Message::Broadcast(b) => {
            put_u32(out, len_u32(b.w.len(), "parameter count")?);
            put_f64s(out, &b.w);
            if let Some(mo) = &b.moments {
                if mo.m.len() != b.w.len() || mo.v.len() != b.w.len() {
                    return Err(WireError::Malformed("moment length differs from model".into()).into());
                }
            }
            put_moments(out, &b.moments);
        }
        Message::Contribution(c) => {
            let u = &c.update;
            put_u32(out, c.client_id);
            out.extend_from_slice(&u.n_local.to_le_bytes());
            out.extend_from_slice(&u.train_loss.to_le_bytes());
            out.push(u8::from(u.exhausted));
            put_u32(out, len_u32(u.delta.dim(), "delta dimension")?);
            put_u32(out, len_u32(u.delta.nnz(), "entry count")?);
            for &(i, v) in u.delta.entries() {
                put_u32(out, i);
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(mo) = &u.momentum_delta {
                if mo.m.len() != u.delta.dim() || mo.v.len() != u.delta.dim() {
                    return Err(WireError::Malformed("moment length differs from delta".into()).into());
                }
            }
            put_moments(out, &u.momentum_delta);
        }
        Message::RoundDone => {}
        Message::Error(text) => out.extend_from_slice(text.as_bytes()),
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(WireError::Malformed("payload ends early".into()).into()),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(WireError::Malformed(format!("flag byte {b}")).into()),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn params(&mut self, len: usize) -> Result<ParamVector> {
        let raw = self.take(len.checked_mul(8).ok_or(WireError::TooLarge(len))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        ParamVector::from_vec(values).map_err(|e| WireError::Malformed(e.to_string()).into())
    }

    fn moments(&mut self, len: usize) -> Result<Option<Moments>> {
        if !self.flag()? {
            return Ok(None);
        }
        let m = self.params(len)?;
        let v = self.params(len)?;
        Ok(Some(Moments { m, v }))
    }

    fn finish(self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(WireError::Malformed(format!("{} unread payload bytes", self.bytes.len() - self.pos)).into())
        }
    }
}

fn read_payload(kind: MsgKind, bytes: &[u8]) -> Result<Message> {
    let mut cur = Cursor { bytes, pos: 0 };
    let message = match kind {
        MsgKind::Hello => Message::Hello { client_id: cur.u32()? },
        MsgKind::Broadcast => {
            let p = cur.u32()? as usize;
            let w = cur.params(p)?;
            let moments = cur.moments(p)?;
            Message::Broadcast(Broadcast { w, moments })
        }
        MsgKind::Contribution => {
            let client_id = cur.u32()?;
            let n_local = cur.u64()?;
            let train_loss = cur.f64()?;
            let exhausted = cur.flag()?;
            let dim = cur.u32()? as usize;
            let count = cur.u32()? as usize;
            let mut entries = Vec::with_capacity(count.min(bytes.len() / 12));
            for _ in 0..count {
                let i = cur.u32()?;
                entries.push((i, cur.f64()?));
            }
            let delta = SparseDelta::from_entries(dim, entries).map_err(|e| WireError::Malformed(e.to_string()))?;
            let momentum_delta = cur.moments(dim)?;
            Message::Contribution(RoundContribution {
                client_id,
                update: ModelUpdate {
                    delta,
                    n_local,
                    momentum_delta,
                    train_loss,
                    exhausted,
                },
            })
        }
        MsgKind::RoundDone => Message::RoundDone,
        MsgKind::Error => {
            let text = std::str::from_utf8(cur.take(bytes.len())?)
                .map_err(|_| WireError::Malformed("error text is not utf-8".into()))?;
            Message::Error(text.to_owned())
        }
    };
    cur.finish()?;
    Ok(message)
}
