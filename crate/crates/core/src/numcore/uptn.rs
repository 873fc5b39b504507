//! UPTN binary tensor files.
//!
//! Layout: magic `UPTN`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64),
//! `u8` ndim, `u8` reserved (0), `ndim` little-endian `u64` dims, then the
//! row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"UPTN";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(8 + 8 * shape.len() + dtype.width() * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), shape.len() as u8, 0]);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let header = bytes.get(..8).ok_or_else(|| Error::Format("truncated header".into()))?;
    if header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let dtype = match header[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let ndim = header[6] as usize;
    if ndim == 0 {
        return Err(Error::Format("zero-dimensional tensor".into()));
    }
    if header[7] != 0 {
        return Err(Error::Format("reserved byte must be 0".into()));
    }
    let dims_end = 8 + 8 * ndim;
    let dim_bytes = bytes.get(8..dims_end).ok_or_else(|| Error::Format("truncated dims".into()))?;
    let shape: Vec<usize> =
        dim_bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {shape:?}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let payload = &bytes[dims_end..];
    let expected = n.checked_mul(dtype.width()).ok_or_else(|| Error::Format("dims overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!("payload has {} bytes, shape {shape:?} needs {expected}", payload.len())));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    debug_assert_eq!(data.len(), numel(&shape));
    Tensor::new(&shape, data)
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
