//! Binary container shared by model and adapter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   "ADPR"
//! version    u32       currently 1
//! kind       u32       0 = model, 1 = adapter
//! header_len u64       byte length of the header
//! header     UTF-8     "key=value\n" lines
//! count      u64       number of f64 values that follow
//! values     f64 * count
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ADPR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Model = 0,
    Adapter = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub header: Vec<(String, String)>,
    pub values: Vec<f64>,
}

impl Container {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format("checkpoint", format!("missing header key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value `{raw}` for `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        let mut out = Vec::with_capacity(32 + header.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::format("checkpoint", msg.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated version"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let kind = match cur.u32().ok_or_else(|| bad("truncated kind"))? {
            0 => Kind::Model,
            1 => Kind::Adapter,
            k => return Err(bad(&format!("unknown kind {k}"))),
        };
        let header_len = cur.u64().ok_or_else(|| bad("truncated header length"))? as usize;
        let header_bytes = cur.take(header_len).ok_or_else(|| bad("truncated header"))?;
        let header_text = std::str::from_utf8(header_bytes).map_err(|_| bad("header is not UTF-8"))?;
        let mut header = Vec::new();
        for line in header_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("header line without `=`"))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = cur.u64().ok_or_else(|| bad("truncated value count"))? as usize;
        let data = cur
            .take(count.checked_mul(8).ok_or_else(|| bad("value count overflow"))?)
            .ok_or_else(|| bad("truncated tensor data"))?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { kind, header, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
