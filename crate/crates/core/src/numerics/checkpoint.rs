//! Binary tensor container shared by checkpoints, hidden-stack files and
//! substrate files.
//!
//! ```text
//! "DABS"                magic, 4 bytes
//! version               u8 (currently 1)
//! record count          u64 LE
//! per record:
//!   record length       u64 LE, bytes that follow
//!   name length         u32 LE
//!   name                UTF-8
//!   rank                u32 LE
//!   extents             rank x u64 LE
//!   data                numel x f32 LE (IEEE-754)
//! ```

use std::fs;
use std::path::Path;

use super::params::Parameter;
use super::tensor::Tensor;
use crate::error::{DabsError, Result};

pub const MAGIC: &[u8; 4] = b"DABS";
pub const FORMAT_VERSION: u8 = 1;

/// Serializes named tensors. Values are stored as `f32`.
pub fn encode_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in records {
        let mut body = Vec::with_capacity(16 + name.len() + 8 * t.rank() + 4 * t.numel());
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            body.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(DabsError::Format { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container produced by [`encode_records`].
pub fn decode_records(bytes: &[u8]) -> Result<Vec<Parameter>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        cur.pos = 0;
        return cur.fail(format!("bad magic {magic:?}"));
    }
    let version = cur.take(1, "version")?[0];
    if version != FORMAT_VERSION {
        cur.pos -= 1;
        return cur.fail(format!("unsupported format version {version}"));
    }
    let count = cur.u64("record count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = cur.u64("record length")? as usize;
        let start = cur.pos;
        if bytes.len() - start < len {
            return cur.fail(format!("truncated record: declared {len} bytes, {} left", bytes.len() - start));
        }
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| DabsError::Format { offset: start as u64 + 4, message: format!("name is not UTF-8: {e}") })?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        if rank == 0 {
            return cur.fail("rank 0 tensor");
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0)
            .ok_or_else(|| DabsError::Format { offset: cur.pos as u64, message: format!("invalid extents {shape:?}") })?;
        let raw = cur.take(numel.checked_mul(4).unwrap_or(usize::MAX), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if cur.pos - start != len {
            return cur.fail(format!("record `{name}` length mismatch: declared {len}, used {}", cur.pos - start));
        }
        let value = Tensor::new(shape, data).map_err(|e| DabsError::Format { offset: start as u64, message: e.to_string() })?;
        out.push(Parameter { name, value });
    }
    if cur.pos != bytes.len() {
        return cur.fail(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok(out)
}

pub fn write_records<'a>(path: &Path, records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    fs::write(path, encode_records(records))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Parameter>> {
    decode_records(&fs::read(path)?)
}
