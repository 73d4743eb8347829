// SPDX-License-Identifier: Apache-2.0

//! Frame header and tag layout.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "JMP1"
//! 4       4     tag             (u32 LE)
//! 8       4     source_rank     (u32 LE)
//! 12      8     payload_length  (u64 LE, bytes)
//! 20      ..    payload         (raw little-endian elements)
//! ```
//!
//! Data tags: `attempt[31:24] | step[23:2] | plane[1:0]`.
//! Control tags: `epoch[31:20] | attempt[19:12] | reason[11:4] | kind[3:2] | 0b10`.

use std::fmt;
use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"JMP1";
pub const HEADER_LEN: usize = 20;

/// Capacity of each per-channel send and receive buffer: 8 MiB.
pub const BUFFER_CAPACITY: usize = 8 << 20;

const STEP_MASK: u32 = 0x3F_FFFF;
const EPOCH_MASK: u32 = 0xFFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Plane {
    AShift = 0,
    BShift = 1,
    Control = 2,
    /// Anything else (result gather, tests).
    Bulk = 3,
}

impl Plane {
    fn from_bits(bits: u32) -> Plane {
        match bits & 0b11 {
            0 => Plane::AShift,
            1 => Plane::BShift,
            2 => Plane::Control,
            _ => Plane::Bulk,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ControlKind {
    Arrive = 0,
    Release = 1,
    Abort = 2,
    Join = 3,
}

/// Why a gang attempt was aborted. Carried in control tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum AbortReason {
    Unspecified = 0,
    WorkerFailure = 1,
    Timeout = 2,
    Protocol = 3,
    Disconnect = 4,
    Injected = 5,
    Setup = 6,
    Transport = 7,
}

impl AbortReason {
    pub fn from_code(code: u8) -> AbortReason {
        match code {
            1 => AbortReason::WorkerFailure,
            2 => AbortReason::Timeout,
            3 => AbortReason::Protocol,
            4 => AbortReason::Disconnect,
            5 => AbortReason::Injected,
            6 => AbortReason::Setup,
            7 => AbortReason::Transport,
            _ => AbortReason::Unspecified,
        }
    }

    pub fn for_error(err: &Error) -> AbortReason {
        match err {
            Error::Setup(_) => AbortReason::Setup,
            Error::Transport(_) | Error::Io(_) => AbortReason::Transport,
            Error::Protocol(_) => AbortReason::Protocol,
            Error::Injected { .. } => AbortReason::Injected,
            _ => AbortReason::WorkerFailure,
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AbortReason::Unspecified => "unspecified",
            AbortReason::WorkerFailure => "worker failure",
            AbortReason::Timeout => "timeout",
            AbortReason::Protocol => "protocol error",
            AbortReason::Disconnect => "disconnect",
            AbortReason::Injected => "injected fault",
            AbortReason::Setup => "setup failure",
            AbortReason::Transport => "transport failure",
        };
        f.write_str(s)
    }
}

/// Decoded fields of a control-plane tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ControlTag {
    pub kind: ControlKind,
    pub attempt: u32,
    pub epoch: u32,
    pub reason: AbortReason,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tag(pub u32);

impl Tag {
    pub fn data(attempt: u32, step: u32, plane: Plane) -> Tag {
        debug_assert!(plane != Plane::Control);
        Tag(((attempt & 0xFF) << 24) | ((step & STEP_MASK) << 2) | plane as u32)
    }

    pub fn control(kind: ControlKind, attempt: u32, epoch: u32, reason: AbortReason) -> Tag {
        Tag(((epoch & EPOCH_MASK) << 20)
            | ((attempt & 0xFF) << 12)
            | ((reason as u32) << 4)
            | ((kind as u32) << 2)
            | Plane::Control as u32)
    }

    pub fn plane(self) -> Plane {
        Plane::from_bits(self.0)
    }

    /// Step field of a data tag.
    pub fn step(self) -> u32 {
        (self.0 >> 2) & STEP_MASK
    }

    /// Attempt, modulo 256, of either tag layout.
    pub fn attempt(self) -> u32 {
        match self.plane() {
            Plane::Control => (self.0 >> 12) & 0xFF,
            _ => self.0 >> 24,
        }
    }

    pub fn as_control(self) -> Option<ControlTag> {
        if self.plane() != Plane::Control {
            return None;
        }
        let kind = match (self.0 >> 2) & 0b11 {
            0 => ControlKind::Arrive,
            1 => ControlKind::Release,
            2 => ControlKind::Abort,
            _ => ControlKind::Join,
        };
        Some(ControlTag {
            kind,
            attempt: (self.0 >> 12) & 0xFF,
            epoch: self.0 >> 20,
            reason: AbortReason::from_code(((self.0 >> 4) & 0xFF) as u8),
        })
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_control() {
            Some(c) => write!(
                f,
                "Tag({:#010x} {:?} attempt={} epoch={} reason={:?})",
                self.0, c.kind, c.attempt, c.epoch, c.reason
            ),
            None => write!(
                f,
                "Tag({:#010x} {:?} attempt={} step={})",
                self.0,
                self.plane(),
                self.attempt(),
                self.step()
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub tag: Tag,
    pub source_rank: u32,
    pub payload_length: u64,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.tag.0.to_le_bytes());
        out[8..12].copy_from_slice(&self.source_rank.to_le_bytes());
        out[12..20].copy_from_slice(&self.payload_length.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; HEADER_LEN]) -> Result<Self> {
        if bytes[0..4] != MAGIC {
            return Err(Error::Protocol(format!("bad frame magic {:02x?}", &bytes[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        Ok(FrameHeader {
            tag: Tag(u32_at(4)),
            source_rank: u32_at(8),
            payload_length: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut raw = [0u8; HEADER_LEN];
        r.read_exact(&mut raw)
            .map_err(|e| Error::transport("reading frame header", e))?;
        Self::decode(&raw)
    }

    /// Like [`read_from`](Self::read_from) but returns `None` on a clean EOF
    /// at the frame boundary.
    pub fn read_or_eof<R: Read>(r: &mut R) -> Result<Option<Self>> {
        match read_raw_header(r) {
            Ok(Some(raw)) => Self::decode(&raw).map(Some),
            Ok(None) => Ok(None),
            Err(e) => Err(Error::transport("reading frame header", e)),
        }
    }
}

/// Reads one raw header; `Ok(None)` on EOF before its first byte.
pub fn read_raw_header<R: Read>(r: &mut R) -> io::Result<Option<[u8; HEADER_LEN]>> {
    let mut raw = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut raw[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "peer closed mid-header",
                ))
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Some(raw))
}

/// A complete frame held in memory. The streaming paths never build one;
/// this is for control traffic, tests and tooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub tag: Tag,
    pub source_rank: u32,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn header(&self) -> FrameHeader {
        FrameHeader {
            tag: self.tag,
            source_rank: self.source_rank,
            payload_length: self.payload.len() as u64,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header().encode());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let head: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| Error::Protocol(format!("frame too short: {} bytes", bytes.len())))?;
        let h = FrameHeader::decode(head)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() as u64 != h.payload_length {
            return Err(Error::Protocol(format!(
                "payload_length {} but {} bytes follow",
                h.payload_length,
                body.len()
            )));
        }
        Ok(WireMessage {
            tag: h.tag,
            source_rank: h.source_rank,
            payload: body.to_vec(),
        })
    }
}
