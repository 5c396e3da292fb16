//! Binary grid files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0    16  magic  b"SPSS-GRID-F64v1\n"
//!     16     8  H  (u64)
//!     24     8  W  (u64)
//!     32     8  D  (u64)
//!     40     8  C  (u64, channel count; 1 for scalar volumes)
//!     48  8·HWDC  payload, IEEE-754 f64 LE, channel-major then (h·W + w)·D + d
//! ```
//!
//! Every write also drops a plain-text `<file>.hdr` sidecar with the dims.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dims, LabelMap, ProbMap, Volume};
use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 16] = b"SPSS-GRID-F64v1\n";
const HEADER_LEN: usize = 16 + 4 * 8;

/// Raw contents of a grid file.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub dims: Dims,
    pub channels: usize,
    pub values: Vec<f64>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".hdr");
    PathBuf::from(name)
}

pub fn encode_grid(dims: Dims, channels: usize, values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + values.len() * 8);
    buf.extend_from_slice(GRID_MAGIC);
    for v in [dims.h, dims.w, dims.d, channels] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<GridFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than header"));
    }
    if &bytes[..16] != GRID_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let field = |i: usize| {
        let start = 16 + 8 * i;
        u64::from_le_bytes(bytes[start..start + 8].try_into().expect("8-byte slice"))
    };
    let header: Vec<usize> = (0..4)
        .map(|i| usize::try_from(field(i)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, "header value overflows usize"))?;
    let dims = Dims::new(header[0], header[1], header[2]);
    let channels = header[3];
    let expected = dims
        .len()
        .checked_mul(channels)
        .ok_or_else(|| Error::format(path, "header dims overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if !payload.len().is_multiple_of(8) {
        return Err(Error::format(path, "payload is not a whole number of f64"));
    }
    if payload.len() / 8 != expected {
        return Err(Error::format(
            path,
            format!(
                "header claims {dims}x{channels} ({expected} scalars), payload has {}",
                payload.len() / 8
            ),
        ));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(GridFile {
        dims,
        channels,
        values,
    })
}

pub fn write_grid(path: &Path, dims: Dims, channels: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode_grid(dims, channels, values)).map_err(|e| Error::io(path, e))?;
    let hdr = format!(
        "dims = {}x{}x{}\nchannels = {channels}\nscalar = f64-le\nlayout = channel-major, (h*W + w)*D + d\n",
        dims.h, dims.w, dims.d
    );
    let side = sidecar_path(path);
    fs::write(&side, hdr).map_err(|e| Error::io(side, e))
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

impl Volume {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_grid(path, self.dims(), 1, self.values())
    }

    pub fn read(path: &Path) -> Result<Volume> {
        let grid = read_grid(path)?;
        if grid.channels != 1 {
            return Err(Error::format(
                path,
                format!("expected 1 channel, found {}", grid.channels),
            ));
        }
        Volume::new(grid.dims, grid.values).map_err(|e| Error::format(path, e.to_string()))
    }
}

impl ProbMap {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_grid(path, self.dims(), self.classes(), self.probs())
    }

    pub fn read(path: &Path) -> Result<ProbMap> {
        let grid = read_grid(path)?;
        ProbMap::new(grid.dims, grid.channels, grid.values)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

impl LabelMap {
    /// Label maps are stored as single-channel volumes of class ids.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_volume().write(path)
    }

    pub fn read(path: &Path, classes: usize) -> Result<LabelMap> {
        let volume = Volume::read(path)?;
        LabelMap::from_volume(&volume, classes).map_err(|e| Error::format(path, e.to_string()))
    }
}
