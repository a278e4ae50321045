//! `DNW1` weight files.
//!
//! ```text
//! "DNW1" | u32 count | count x (u16 name_len, name, u8 rank, rank x u32 dim, f32 data)
//!        | u32 config_len | config (key=value lines)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::graph::Tensor;
use super::{DualNetModel, ModelConfig};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"DNW1";

pub fn write_model(model: &DualNetModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(model.tensors().len() as u32).to_le_bytes());
    for (name, t) in model.names().zip(model.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Shape(format!("tensor {name} holds non-finite value {v}")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    let blob = model.config().to_kv();
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    Ok(out)
}

pub fn save_model(model: &DualNetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what} needs {n} bytes at offset {}, {} left", self.pos, self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_model(bytes: &[u8], path: &Path) -> Result<DualNetModel> {
    let malformed = |detail: String| Error::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "DNW1",
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed(format!("tensor {name} shape {shape:?} overflows")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| malformed("tensor too large".into()))?, &format!("tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        named.push((name, Tensor::new(shape, data)));
    }
    let blob_len = r.u32("config length")? as usize;
    let blob = std::str::from_utf8(r.take(blob_len, "config")?).map_err(|_| malformed("config is not UTF-8".into()))?;
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let config = ModelConfig::from_kv(blob)?;
    DualNetModel::from_tensors(config, named)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DualNetModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes, path)
}
