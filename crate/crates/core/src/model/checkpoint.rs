//! Checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic     8 bytes  "MPRCKPT\0"
//! version   u32      1
//! config    u32 length + UTF-8 JSON of ModelConfig
//! tensors   u32 count, then per tensor:
//!             u32 name length + UTF-8 name
//!             u32 rank + rank x u32 dims
//!             f32 little-endian data, product(dims) values
//! ```
//!
//! The tensor table lists the trainable parameters in model order followed by
//! the batch-norm running statistics (`bn{i}.running_mean`,
//! `bn{i}.running_var`).

use std::path::Path;

use super::{ModelConfig, ModelState, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MPRCKPT\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn to_bytes(state: &ModelState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    let config = serde_json::to_vec(state.config()).expect("config serializes");
    put_u32(&mut out, config.len());
    out.extend_from_slice(&config);
    let tensors: Vec<&Tensor<f32>> = state.params().iter().chain(state.buffers()).collect();
    put_u32(&mut out, tensors.len());
    for t in tensors {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.shape.len());
        for &d in &t.shape {
            put_u32(&mut out, d);
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("unexpected end of file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelState<f32>> {
    let bad = |reason: String| Error::Format { what: "checkpoint", path: path.to_path_buf(), reason };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(&bad)? != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = r.u32().map_err(&bad)?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = r.u32().map_err(&bad)?;
    let config: ModelConfig = serde_json::from_slice(r.take(n).map_err(&bad)?).map_err(|e| bad(e.to_string()))?;
    config.validate()?;
    let count = r.u32().map_err(&bad)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32().map_err(&bad)?;
        let name = String::from_utf8(r.take(n).map_err(&bad)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let rank = r.u32().map_err(&bad)?;
        let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>().map_err(&bad)?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large".into()))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| bad("tensor too large".into()))?).map_err(&bad)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let n_buffers = 2 * config.conv_channels.len();
    if tensors.len() < n_buffers {
        return Err(bad("tensor table too short".into()));
    }
    let buffers = tensors.split_off(tensors.len() - n_buffers);
    ModelState::from_parts(config, tensors, buffers).map_err(|e| match e {
        Error::ShapeMismatch(reason) | Error::Config(reason) => bad(reason),
        other => other,
    })
}

pub fn save(state: &ModelState<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
