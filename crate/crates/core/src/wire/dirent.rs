//! Directory entry records returned by `getdents`.
//!
//! Layout (little-endian): `ino: u64 | next_off: u64 | reclen: u16 | dtype: u8 |
//! name bytes | NUL | zero padding`, with `reclen` rounded up to a multiple of 8.

use thiserror::Error;

pub const DT_UNKNOWN: u8 = 0;
pub const DT_DIR: u8 = 4;
pub const DT_REG: u8 = 8;

const HEADER: usize = 19;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirentRecord {
    pub ino: u64,
    pub next_off: u64,
    pub dtype: u8,
    pub name: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DirentError {
    #[error("buffer too small for the first directory entry")]
    CapTooSmall,
    #[error("malformed dirent buffer")]
    Malformed,
}

/// Size of the record for a name of `name_len` bytes.
pub fn reclen(name_len: usize) -> usize {
    (HEADER + name_len + 1).div_ceil(8) * 8
}

/// Encodes the longest prefix of `entries` that fits in `cap` bytes.
///
/// Entries are `(name, ino, dtype)`. `first_off` is the directory position of
/// `entries[0]`; each record's `next_off` is the position after it.
/// Returns the buffer and how many entries were consumed.
pub fn encode_dirents_at(
    entries: &[(&str, u64, u8)],
    cap: usize,
    first_off: u64,
) -> Result<(Vec<u8>, usize), DirentError> {
    let mut out = Vec::new();
    let mut consumed = 0;
    for (i, (name, ino, dtype)) in entries.iter().enumerate() {
        let len = reclen(name.len());
        if out.len() + len > cap {
            break;
        }
        let start = out.len();
        out.extend_from_slice(&ino.to_le_bytes());
        out.extend_from_slice(&(first_off + i as u64 + 1).to_le_bytes());
        out.extend_from_slice(&(len as u16).to_le_bytes());
        out.push(*dtype);
        out.extend_from_slice(name.as_bytes());
        out.resize(start + len, 0);
        consumed += 1;
    }
    if consumed == 0 && !entries.is_empty() {
        return Err(DirentError::CapTooSmall);
    }
    Ok((out, consumed))
}

pub fn encode_dirents(entries: &[(&str, u64, u8)], cap: usize) -> Result<(Vec<u8>, usize), DirentError> {
    encode_dirents_at(entries, cap, 0)
}

pub fn decode_dirents(mut buf: &[u8]) -> Result<Vec<DirentRecord>, DirentError> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        if buf.len() < HEADER + 1 {
            return Err(DirentError::Malformed);
        }
        let ino = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let next_off = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let len = u16::from_le_bytes(buf[16..18].try_into().unwrap()) as usize;
        let dtype = buf[18];
        if len < HEADER + 1 || len % 8 != 0 || len > buf.len() {
            return Err(DirentError::Malformed);
        }
        let name_area = &buf[HEADER..len];
        let nul = name_area.iter().position(|&b| b == 0).ok_or(DirentError::Malformed)?;
        let name = std::str::from_utf8(&name_area[..nul]).map_err(|_| DirentError::Malformed)?;
        out.push(DirentRecord { ino, next_off, dtype, name: name.to_owned() });
        buf = &buf[len..];
    }
    Ok(out)
}
