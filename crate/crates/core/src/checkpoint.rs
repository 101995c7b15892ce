//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "MEXPCKPT"
//! version      u32       FORMAT_VERSION
//! config_len   u32       byte length of the model-config text that follows
//! config       bytes     UTF-8 (JSON produced by the model config)
//! count        u32       number of entries
//! entry*:
//!   name_len   u32
//!   name       bytes     UTF-8, unique
//!   dtype      u8        0 = f32, 1 = f64
//!   ndim       u32
//!   dims       u64 × ndim
//!   values     dtype-sized little-endian floats, row-major, product(dims) of them
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"MEXPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub entries: Vec<Entry>,
}

pub fn encode<T: Real>(store: &ParamStore<T>, config: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.to_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Version(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Version(format!("invalid utf-8: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Version("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!("checkpoint format {version}, expected {FORMAT_VERSION}")));
    }
    let config = r.string()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Version(format!("unknown dtype code {code}")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.size_of())?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::from_le).collect(),
        };
        entries.push(Entry { name, shape, dtype, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Version(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { version, config, entries })
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, config: &str) -> Result<()> {
    fs::write(path, encode(store, config)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl Checkpoint {
    /// Copy every entry into `store`. The config text, parameter names and
    /// shapes must match exactly.
    pub fn restore<T: Real>(&self, store: &mut ParamStore<T>, expected_config: &str) -> Result<()> {
        if self.config != expected_config {
            return Err(Error::Version("checkpoint was written for a different model configuration".into()));
        }
        if self.entries.len() != store.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} tensors, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store
                .id(&e.name)
                .ok_or_else(|| Error::Version(format!("unknown parameter `{}` in checkpoint", e.name)))?;
            if store.value(id).shape() != e.shape.as_slice() {
                return Err(Error::Version(format!(
                    "parameter `{}` has shape {:?} in checkpoint, {:?} in model",
                    e.name,
                    e.shape,
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = Tensor::from_f64(&e.shape, &e.values)?;
        }
        Ok(())
    }
}
