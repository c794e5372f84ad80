//! Fixed-size stat record returned by `stat`, `lstat` and `fstat`.
//!
//! Layout (little-endian, 40 bytes): `ino: u64 | size: u64 | mode: u32 |
//! nlink: u32 | atime_ns: i64 | mtime_ns: i64`.

use crate::abi::{S_IFDIR, S_IFMT, S_IFREG};

pub const STAT_SIZE: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StatRecord {
    pub ino: u64,
    pub size: u64,
    pub mode: u32,
    pub nlink: u32,
    pub atime_ns: i64,
    pub mtime_ns: i64,
}

impl StatRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STAT_SIZE);
        out.extend_from_slice(&self.ino.to_le_bytes());
        out.extend_from_slice(&self.size.to_le_bytes());
        out.extend_from_slice(&self.mode.to_le_bytes());
        out.extend_from_slice(&self.nlink.to_le_bytes());
        out.extend_from_slice(&self.atime_ns.to_le_bytes());
        out.extend_from_slice(&self.mtime_ns.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Option<StatRecord> {
        if buf.len() < STAT_SIZE {
            return None;
        }
        Some(StatRecord {
            ino: u64::from_le_bytes(buf[0..8].try_into().ok()?),
            size: u64::from_le_bytes(buf[8..16].try_into().ok()?),
            mode: u32::from_le_bytes(buf[16..20].try_into().ok()?),
            nlink: u32::from_le_bytes(buf[20..24].try_into().ok()?),
            atime_ns: i64::from_le_bytes(buf[24..32].try_into().ok()?),
            mtime_ns: i64::from_le_bytes(buf[32..40].try_into().ok()?),
        })
    }

    pub fn is_dir(&self) -> bool {
        self.mode & S_IFMT == S_IFDIR
    }

    pub fn is_file(&self) -> bool {
        self.mode & S_IFMT == S_IFREG
    }

    pub fn perm(&self) -> u32 {
        self.mode & 0o7777
    }
}
