//! `CDT1` tensor files: a small header followed by a little-endian payload.
//!
//! ```text
//! magic  "CDT1"        4 bytes
//! dtype  u32           1 = f32, 2 = f64
//! rank   u32
//! dims   u64 × rank
//! data   product(dims) values, row-major
//! ```

use std::io::Read;
use std::path::Path;

use crate::error::{CdmError, Result};

pub const MAGIC: &[u8; 4] = b"CDT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(CdmError::Format(format!("unknown tensor dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// An n-dimensional array held in `f64`; `dtype` selects the stored width.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn new(dtype: DType, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(CdmError::Shape(format!("dims {dims:?} hold {n} values, got {}", data.len())));
        }
        Ok(TensorFile { dtype, dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + self.data.len() * self.dtype.width());
        self.write_into(&mut out);
        out
    }

    pub fn write_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.dtype.code().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => self.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => self.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    /// Parses one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CdmError::Format(format!("bad tensor magic {magic:?}")));
        }
        let dtype = DType::from_code(read_u32(&mut cur)?)?;
        let rank = read_u32(&mut cur)? as usize;
        if rank > 16 {
            return Err(CdmError::Format(format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut cur)? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| CdmError::Format(format!("tensor dims {dims:?} overflow")))?;
        let w = dtype.width();
        let need = n.checked_mul(w).ok_or_else(|| CdmError::Format("payload size overflow".into()))?;
        if cur.len() < need {
            return Err(CdmError::Corruption(format!(
                "tensor payload truncated: need {need} bytes, have {}",
                cur.len()
            )));
        }
        let payload = &cur[..need];
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let consumed = bytes.len() - cur.len() + need;
        Ok((TensorFile { dtype, dims, data }, consumed))
    }

    /// Parses a buffer holding exactly one tensor.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::parse(bytes)?;
        if used != bytes.len() {
            return Err(CdmError::Corruption(format!("{} trailing bytes after tensor", bytes.len() - used)));
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CdmError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CdmError::Format(m) => CdmError::Format(format!("{}: {m}", path.display())),
            CdmError::Corruption(m) => CdmError::Corruption(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    cur.read_exact(buf).map_err(|_| CdmError::Corruption(format!("file ends inside tensor {what}")))
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b, "header")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cur, &mut b, "header")?;
    Ok(u64::from_le_bytes(b))
}
