//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "FRACNET\0"
//! version      u32      currently 1
//! config_len   u64
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! n_params     u64
//! n_params times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank × u64
//!   dtype      u8       0 = f32, 1 = f64
//!   data       product(dims) elements of dtype
//! ```
//!
//! Parameters appear in layout order. Reading converts to the requested
//! precision.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Array, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRACNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn dtype_tag<T: Scalar>() -> u8 {
    if T::BYTES == 4 {
        0
    } else {
        1
    }
}

/// Serializes `model` into the checkpoint layout.
pub fn write_checkpoint<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())
        .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(dtype_tag::<T>());
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::input("checkpoint is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::input("checkpoint length overflows"))
    }
}

/// Parses a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::input("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::input(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::input(format!("bad checkpoint config: {e}")))?;
    config.validate()?;
    let count = r.len()?;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::input("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::input("parameter shape overflows"))?;
        let data: Vec<T> = match r.u8()? {
            0 => r.take(numel * 4)?.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            1 => r.take(numel * 8)?.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
            t => return Err(Error::input(format!("unknown dtype tag {t}"))),
        };
        named.push((name, Array::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::input("trailing bytes after checkpoint"));
    }
    let store = ParamStore::from_named(&config, named)?;
    Model::from_store(config, store)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
