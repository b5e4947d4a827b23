//! Binary container shared by checkpoints and session exports.
//!
//! ```text
//! magic      [u8; 4]
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON
//! count      u32
//! count × { name_len u32, name, dtype u8 (0 = f64), ndim u32, dims u64 × ndim, offset u64 }
//! payload    little-endian f64 values; offsets are relative to its start
//! ```
//!
//! All integers are little-endian.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn write<W: Write>(
    out: &mut W,
    magic: &[u8; 4],
    meta: &serde_json::Value,
    entries: &[(String, &Tensor)],
) -> Result<()> {
    let meta = serde_json::to_vec(meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    for (_, t) in entries {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a container, checking magic, version and every entry's bounds.
pub fn read(bytes: &[u8], magic: &[u8; 4]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != magic {
        return Err(Error::format(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let at = c.pos as u64;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let meta_len = c.u32("metadata length")? as usize;
    let at = c.pos as u64;
    let meta: serde_json::Value = serde_json::from_slice(c.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(at, format!("metadata is not JSON: {e}")))?;
    let count = c.u32("entry count")? as usize;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos as u64;
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let at = c.pos as u64;
        let dtype = c.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::format(at, format!("unknown dtype {dtype}")));
        }
        let ndim = c.u32("rank")? as usize;
        if ndim > 8 {
            return Err(Error::format(at, format!("rank {ndim} too large")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("dimension")? as usize);
        }
        let offset = c.u64("offset")?;
        dir.push((at, name, shape, offset));
    }
    let base = c.pos;
    let payload = &bytes[base..];
    let mut out = Vec::with_capacity(dir.len());
    for (at, name, shape, offset) in dir {
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(at, "shape overflows"))?;
        let start = usize::try_from(offset).map_err(|_| Error::format(at, "offset overflows"))?;
        let end = numel
            .checked_mul(8)
            .and_then(|n| start.checked_add(n))
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                Error::format(
                    (base + start.min(payload.len())) as u64,
                    format!("payload of {name} runs past end of file"),
                )
            })?;
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok((meta, out))
}
