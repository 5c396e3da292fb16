//! Versioned checkpoint files.
//!
//! ```text
//! magic      16 bytes  b"SPSS-CKPT-F64\0\0\0"
//! version    u32       CHECKPOINT_VERSION
//! in/base/deep/classes/embed  5 × u32
//! dropout    f64
//! tensors    u32 count, then per tensor: rank u32, dims rank × u64, values f64…
//! ```
//! All fields little-endian.

use std::fs;
use std::path::Path;

use super::{Architecture, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"SPSS-CKPT-F64\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let a = params.arch();
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    for v in [a.in_channels, a.base_channels, a.deep_channels, a.classes, a.embed_dim] {
        buf.extend((v as u32).to_le_bytes());
    }
    buf.extend(a.dropout.to_le_bytes());
    buf.extend((params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        buf.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend(v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(16)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let arch = Architecture {
        in_channels: dims[0],
        base_channels: dims[1],
        deep_channels: dims[2],
        classes: dims[3],
        embed_dim: dims[4],
        dropout: r.f64()?,
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(path, "tensor size overflow"))?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    ModelParams::from_tensors(arch, tensors).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
