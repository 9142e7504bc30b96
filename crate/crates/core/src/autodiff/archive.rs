//! Versioned binary container of named tensors plus a small key/value header.
//!
//! ```text
//! "DSCKPT1\n"
//! u32 meta_len, meta_len bytes of `key=value\n` lines
//! u32 count
//! count × { u32 name_len, name, u32 ndim, ndim × u64 dim, numel × f64 LE }
//! ```

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8] = b"DSCKPT1\n";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .ok_or_else(|| Error::parse("checkpoint", format!("missing meta key {key}")))?
            .parse()
            .map_err(|_| Error::parse("checkpoint", format!("bad value for {key}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ARCHIVE_MAGIC.to_vec();
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend((meta.len() as u32).to_le_bytes());
        out.extend(meta.as_bytes());
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let bad = |m: &str| Error::parse("checkpoint", m.to_string());
        let mut r = Reader {
            buf: bytes.strip_prefix(ARCHIVE_MAGIC).ok_or_else(|| bad("bad magic"))?,
        };
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("meta not utf-8"))?;
        let meta = meta_text
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| bad("meta line without '='"))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| bad("tensor name not utf-8"))?
                .to_string();
            let nd = r.u32()? as usize;
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Archive { meta, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::parse("checkpoint", "truncated"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
