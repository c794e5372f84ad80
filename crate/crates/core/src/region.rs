//! Byte array shared between the kernel and one sync-convention guest.
//!
//! The region is backed by 32-bit atomics so both threads can touch it without
//! `unsafe`. Data bytes use relaxed accesses; ordering comes from the wake word
//! (release on the kernel side, acquire on the guest side).

use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("access of {len} bytes at offset {off} is outside the {size}-byte region")]
pub struct OutOfBounds {
    pub off: usize,
    pub len: usize,
    pub size: usize,
}

pub struct SharedRegion {
    words: Box<[AtomicU32]>,
    size: usize,
}

impl std::fmt::Debug for SharedRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SharedRegion").field("size", &self.size).finish()
    }
}

impl SharedRegion {
    pub fn new(size: usize) -> Self {
        let words = (0..size.div_ceil(4)).map(|_| AtomicU32::new(0)).collect();
        SharedRegion { words, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn check(&self, off: usize, len: usize) -> Result<(), OutOfBounds> {
        match off.checked_add(len) {
            Some(end) if end <= self.size => Ok(()),
            _ => Err(OutOfBounds { off, len, size: self.size }),
        }
    }

    /// The aligned 32-bit word at `off`.
    pub fn word(&self, off: usize) -> &AtomicU32 {
        assert!(off % 4 == 0 && off + 4 <= self.size, "bad word offset {off}");
        &self.words[off / 4]
    }

    pub fn read(&self, off: usize, buf: &mut [u8]) -> Result<(), OutOfBounds> {
        self.check(off, buf.len())?;
        let mut pos = off;
        let mut i = 0;
        while i < buf.len() {
            let w = self.words[pos / 4].load(Ordering::Relaxed).to_le_bytes();
            let in_word = pos % 4;
            let n = (4 - in_word).min(buf.len() - i);
            buf[i..i + n].copy_from_slice(&w[in_word..in_word + n]);
            i += n;
            pos += n;
        }
        Ok(())
    }

    pub fn read_vec(&self, off: usize, len: usize) -> Result<Vec<u8>, OutOfBounds> {
        let mut v = vec![0; len];
        self.read(off, &mut v)?;
        Ok(v)
    }

    pub fn write(&self, off: usize, data: &[u8]) -> Result<(), OutOfBounds> {
        self.check(off, data.len())?;
        let mut pos = off;
        let mut i = 0;
        while i < data.len() {
            let word = &self.words[pos / 4];
            let in_word = pos % 4;
            let n = (4 - in_word).min(data.len() - i);
            if n == 4 {
                word.store(u32::from_le_bytes(data[i..i + 4].try_into().unwrap()), Ordering::Relaxed);
            } else {
                let mut bytes = [0u8; 4];
                let mut mask = [0u8; 4];
                bytes[in_word..in_word + n].copy_from_slice(&data[i..i + n]);
                mask[in_word..in_word + n].fill(0xff);
                let mask = u32::from_le_bytes(mask);
                word.fetch_and(!mask, Ordering::Relaxed);
                word.fetch_or(u32::from_le_bytes(bytes), Ordering::Relaxed);
            }
            i += n;
            pos += n;
        }
        Ok(())
    }

    /// Reads a NUL-terminated byte string starting at `off`.
    pub fn read_cstr(&self, off: usize) -> Result<Vec<u8>, OutOfBounds> {
        self.check(off, 1)?;
        let mut out = Vec::new();
        let mut pos = off;
        loop {
            if pos >= self.size {
                return Err(OutOfBounds { off, len: pos - off + 1, size: self.size });
            }
            let mut b = [0u8; 1];
            self.read(pos, &mut b)?;
            if b[0] == 0 {
                return Ok(out);
            }
            out.push(b[0]);
            pos += 1;
        }
    }

    pub fn read_i64(&self, off: usize) -> Result<i64, OutOfBounds> {
        let mut b = [0u8; 8];
        self.read(off, &mut b)?;
        Ok(i64::from_le_bytes(b))
    }

    pub fn write_i64(&self, off: usize, v: i64) -> Result<(), OutOfBounds> {
        self.write(off, &v.to_le_bytes())
    }

    pub fn read_u32(&self, off: usize) -> Result<u32, OutOfBounds> {
        let mut b = [0u8; 4];
        self.read(off, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn write_u32(&self, off: usize, v: u32) -> Result<(), OutOfBounds> {
        self.write(off, &v.to_le_bytes())
    }
}
