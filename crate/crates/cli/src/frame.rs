//! Terminal frame protocol.
//!
//! Every frame is `kind: u8 | len: u32 LE | payload`. Kinds: 0 stdin,
//! 1 stdout, 2 stderr (raw bytes), 3 resize (`cols: u16 LE, rows: u16 LE`),
//! 4 exit (`status: i32 LE`). A session opens with a JSON text handshake
//! [`Handshake`] answered by [`Accept`]; the exit frame is the last frame the
//! server sends.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROTOCOL_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 5;
/// Larger payloads are rejected rather than buffered.
pub const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Stdin = 0,
    Stdout = 1,
    Stderr = 2,
    Resize = 3,
    Exit = 4,
}

impl TryFrom<u8> for FrameKind {
    type Error = FrameError;

    fn try_from(b: u8) -> Result<Self, FrameError> {
        Ok(match b {
            0 => FrameKind::Stdin,
            1 => FrameKind::Stdout,
            2 => FrameKind::Stderr,
            3 => FrameKind::Resize,
            4 => FrameKind::Exit,
            other => return Err(FrameError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Stdin(Vec<u8>),
    Stdout(Vec<u8>),
    Stderr(Vec<u8>),
    Resize { cols: u16, rows: u16 },
    Exit(i32),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("frame payload of {0} bytes exceeds the limit")]
    TooLong(usize),
    #[error("{kind:?} frame with a {len}-byte payload")]
    BadPayload { kind: FrameKind, len: usize },
    #[error("{0} trailing bytes do not form a frame")]
    Truncated(usize),
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Stdin(_) => FrameKind::Stdin,
            Frame::Stdout(_) => FrameKind::Stdout,
            Frame::Stderr(_) => FrameKind::Stderr,
            Frame::Resize { .. } => FrameKind::Resize,
            Frame::Exit(_) => FrameKind::Exit,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let mut small = [0u8; 4];
        let payload: &[u8] = match self {
            Frame::Stdin(b) | Frame::Stdout(b) | Frame::Stderr(b) => b,
            Frame::Resize { cols, rows } => {
                small[..2].copy_from_slice(&cols.to_le_bytes());
                small[2..].copy_from_slice(&rows.to_le_bytes());
                &small
            }
            Frame::Exit(code) => {
                small.copy_from_slice(&code.to_le_bytes());
                &small
            }
        };
        out.push(self.kind() as u8);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    fn from_parts(kind: FrameKind, payload: &[u8]) -> Result<Frame, FrameError> {
        let fixed = |n: usize| {
            if payload.len() == n {
                Ok(())
            } else {
                Err(FrameError::BadPayload { kind, len: payload.len() })
            }
        };
        Ok(match kind {
            FrameKind::Stdin => Frame::Stdin(payload.to_vec()),
            FrameKind::Stdout => Frame::Stdout(payload.to_vec()),
            FrameKind::Stderr => Frame::Stderr(payload.to_vec()),
            FrameKind::Resize => {
                fixed(4)?;
                Frame::Resize {
                    cols: u16::from_le_bytes([payload[0], payload[1]]),
                    rows: u16::from_le_bytes([payload[2], payload[3]]),
                }
            }
            FrameKind::Exit => {
                fixed(4)?;
                Frame::Exit(i32::from_le_bytes(payload.try_into().expect("length checked")))
            }
        })
    }
}

/// Incremental decoder for a byte stream of frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    pos: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        FrameDecoder::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.pos > 0 && self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame; `Ok(None)` when more bytes are needed. Errors
    /// are sticky: the stream cannot be resynchronised.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        let rest = &self.buf[self.pos..];
        if rest.is_empty() {
            return Ok(None);
        }
        let kind = FrameKind::try_from(rest[0])?;
        if rest.len() < HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_le_bytes(rest[1..HEADER_LEN].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(FrameError::TooLong(len));
        }
        if rest.len() < HEADER_LEN + len {
            return Ok(None);
        }
        let frame = Frame::from_parts(kind, &rest[HEADER_LEN..HEADER_LEN + len])?;
        self.pos += HEADER_LEN + len;
        Ok(Some(frame))
    }

    /// Bytes received but not yet consumed by a frame.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Decodes a buffer that must hold only whole frames.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Frame>, FrameError> {
    let mut d = FrameDecoder::new();
    d.push(bytes);
    let mut out = Vec::new();
    while let Some(f) = d.next_frame()? {
        out.push(f);
    }
    match d.pending() {
        0 => Ok(out),
        n => Err(FrameError::Truncated(n)),
    }
}

/// First message from the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub version: u32,
    pub cols: u16,
    pub rows: u16,
}

/// Server reply to a handshake; `pid` is the session's shell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accept {
    pub version: u32,
    pub pid: u32,
}
