//! Byte encoding of async syscall envelopes and replies.
//!
//! Envelope: `id: u32 LE | trap: u32 LE | argc: u8 | argc × value`.
//! Value: one tag byte followed by a little-endian payload:
//!
//! * `0x01` Int: `i64`
//! * `0x02` Str: `u32` length, UTF-8 bytes
//! * `0x03` Bytes: `u32` length, bytes
//! * `0x04` IntList: `u32` count, `count × i64`
//!
//! Reply: `id: u32 | ret: i64 | aux: i64 | errno: i32 | has_payload: u8 |
//! [len: u32 | bytes]`, all little-endian.

use thiserror::Error;

const TAG_INT: u8 = 0x01;
const TAG_STR: u8 = 0x02;
const TAG_BYTES: u8 = 0x03;
const TAG_INT_LIST: u8 = 0x04;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Str(String),
    Bytes(Vec<u8>),
    IntList(Vec<i64>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown value tag {0:#04x}")]
    BadTag(u8),
    #[error("string argument is not UTF-8")]
    BadUtf8,
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
    #[error("too many arguments")]
    TooManyArgs,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyscallEnvelope {
    pub id: u32,
    pub trap: u32,
    pub args: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SyscallReply {
    pub id: u32,
    pub ret: i64,
    pub aux: i64,
    pub errno: i32,
    pub payload: Option<Vec<u8>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, WireError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

impl Value {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Value::Int(v) => {
                out.push(TAG_INT);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::Str(s) => {
                out.push(TAG_STR);
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Value::Bytes(b) => {
                out.push(TAG_BYTES);
                out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                out.extend_from_slice(b);
            }
            Value::IntList(l) => {
                out.push(TAG_INT_LIST);
                out.extend_from_slice(&(l.len() as u32).to_le_bytes());
                for v in l {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Value, WireError> {
        match r.u8()? {
            TAG_INT => Ok(Value::Int(r.i64()?)),
            TAG_STR => {
                let n = r.u32()? as usize;
                let s = std::str::from_utf8(r.take(n)?).map_err(|_| WireError::BadUtf8)?;
                Ok(Value::Str(s.to_owned()))
            }
            TAG_BYTES => {
                let n = r.u32()? as usize;
                Ok(Value::Bytes(r.take(n)?.to_vec()))
            }
            TAG_INT_LIST => {
                let n = r.u32()? as usize;
                // Bound the allocation by what the buffer can actually hold.
                if n > (r.buf.len() - r.pos) / 8 {
                    return Err(WireError::Truncated);
                }
                let mut l = Vec::with_capacity(n);
                for _ in 0..n {
                    l.push(r.i64()?);
                }
                Ok(Value::IntList(l))
            }
            t => Err(WireError::BadTag(t)),
        }
    }

    pub fn encoded_len(&self) -> usize {
        1 + match self {
            Value::Int(_) => 8,
            Value::Str(s) => 4 + s.len(),
            Value::Bytes(b) => 4 + b.len(),
            Value::IntList(l) => 4 + 8 * l.len(),
        }
    }
}

impl SyscallEnvelope {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let argc = u8::try_from(self.args.len()).map_err(|_| WireError::TooManyArgs)?;
        let len = 9 + self.args.iter().map(Value::encoded_len).sum::<usize>();
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(&self.id.to_le_bytes());
        out.extend_from_slice(&self.trap.to_le_bytes());
        out.push(argc);
        for a in &self.args {
            a.encode_into(&mut out);
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<SyscallEnvelope, WireError> {
        let mut r = Reader::new(buf);
        let id = r.u32()?;
        let trap = r.u32()?;
        let argc = r.u8()?;
        let mut args = Vec::with_capacity(argc as usize);
        for _ in 0..argc {
            args.push(Value::decode_from(&mut r)?);
        }
        r.finish()?;
        Ok(SyscallEnvelope { id, trap, args })
    }
}

impl SyscallReply {
    pub fn ok(id: u32, ret: i64) -> Self {
        SyscallReply { id, ret, ..Default::default() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + self.payload.as_ref().map_or(0, |p| 4 + p.len()));
        out.extend_from_slice(&self.id.to_le_bytes());
        out.extend_from_slice(&self.ret.to_le_bytes());
        out.extend_from_slice(&self.aux.to_le_bytes());
        out.extend_from_slice(&self.errno.to_le_bytes());
        match &self.payload {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&(p.len() as u32).to_le_bytes());
                out.extend_from_slice(p);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<SyscallReply, WireError> {
        let mut r = Reader::new(buf);
        let id = r.u32()?;
        let ret = r.i64()?;
        let aux = r.i64()?;
        let errno = r.i32()?;
        let payload = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                Some(r.take(n)?.to_vec())
            }
            t => return Err(WireError::BadTag(t)),
        };
        r.finish()?;
        Ok(SyscallReply { id, ret, aux, errno, payload })
    }
}

/// Packs a string list (argv, environ) as `count: u32 | count × (len: u32 | bytes)`.
pub fn pack_strvec<S: AsRef<str>>(items: &[S]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for s in items {
        let s = s.as_ref().as_bytes();
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s);
    }
    out
}

/// Inverse of [`pack_strvec`]. Returns the list and the number of bytes consumed.
pub fn unpack_strvec(buf: &[u8]) -> Result<(Vec<String>, usize), WireError> {
    let mut r = Reader::new(buf);
    let n = r.u32()? as usize;
    if n > buf.len() / 4 {
        return Err(WireError::Truncated);
    }
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let s = std::str::from_utf8(r.take(len)?).map_err(|_| WireError::BadUtf8)?;
        items.push(s.to_owned());
    }
    Ok((items, r.pos))
}

/// Per-process call id source. Ids start at 1, never return 0, and skip ids
/// that are still outstanding when the counter wraps.
#[derive(Clone, Debug)]
pub struct CallIdAllocator {
    next: u32,
    max: u32,
}

impl Default for CallIdAllocator {
    fn default() -> Self {
        CallIdAllocator::with_max(u32::MAX)
    }
}

impl CallIdAllocator {
    /// An allocator over `1..=max`; small values make wrap behaviour testable.
    pub fn with_max(max: u32) -> Self {
        assert!(max >= 1);
        CallIdAllocator { next: 1, max }
    }

    /// Returns a fresh id for which `outstanding(id)` is false.
    ///
    /// Panics if every id in range is outstanding.
    pub fn next_id(&mut self, outstanding: impl Fn(u32) -> bool) -> u32 {
        for _ in 0..=u64::from(self.max) {
            let id = self.next;
            self.next = if self.next >= self.max { 1 } else { self.next + 1 };
            if !outstanding(id) {
                return id;
            }
        }
        panic!("all {} call ids outstanding", self.max);
    }
}
