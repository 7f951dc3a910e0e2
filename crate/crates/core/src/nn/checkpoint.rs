//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic      8 bytes  "PFCNNCK1"
//! version    u32      currently 1
//! json_len   u32
//! json       UTF-8    {"model": ModelConfig, "run": <caller echo>}
//! n_tensors  u32
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (ndim x u32)
//!   data     product(dims) x f32 LE, row-major
//! ```
//!
//! Only parameters are stored; optimizer state is not.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::model::{Model, ModelConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PFCNNCK1";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("checkpoint field exceeds u32"))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &Model<f32>, run: &Value) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&json!({ "model": model.config, "run": run }))?;
    put_u32(&mut buf, header.len())?;
    buf.extend_from_slice(&header);
    let names = model.param_names();
    put_u32(&mut buf, names.len())?;
    for (name, t) in names.iter().zip(model.params()) {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::invalid("checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes a checkpoint into a model and the caller's `run` echo.
pub fn decode(buf: &[u8]) -> Result<(Model<f32>, Value)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::invalid("not a model checkpoint (bad magic)"));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let header: Value = serde_json::from_slice(r.take(n)?)?;
    let config: ModelConfig = serde_json::from_value(header["model"].clone())?;
    let mut model = Model::<f32>::build(config, 0)?;
    let names = model.param_names();
    let count = r.u32()?;
    if count != names.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {count} tensors, model needs {}",
            names.len()
        )));
    }
    let mut params = model.params_mut();
    for (name, slot) in names.iter().zip(params.iter_mut()) {
        let len = r.u32()?;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| Error::invalid("tensor name is not UTF-8"))?;
        if got != name {
            return Err(Error::invalid(format!("expected tensor `{name}`, found `{got}`")));
        }
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if dims != slot.shape() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {dims:?}, expected {:?}",
                slot.shape()
            )));
        }
        let bytes = r.take(4 * slot.len())?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        **slot = Tensor::new(dims, data)?;
    }
    if r.pos != buf.len() {
        return Err(Error::invalid("trailing bytes after checkpoint"));
    }
    Ok((model, header["run"].clone()))
}

pub fn save(model: &Model<f32>, run: &Value, path: &Path) -> Result<()> {
    fs::write(path, encode(model, run)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model<f32>, Value)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
