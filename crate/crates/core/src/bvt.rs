//! `BVT1` binary tensor dumps.
//!
//! Layout: the magic `BVT1`, one dtype byte (0 = f32, 1 = f64), one byte for
//! the number of dims, each dim as a little-endian `u64`, then the row-major
//! little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, dtype: DType) -> Result<()> {
    let ndim = u8::try_from(t.dims().len()).map_err(|_| Error::Format(format!("{} dims do not fit in one byte", t.dims().len())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code(), ndim])?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a dump; f32 payloads are widened to f64.
pub fn read_tensor<R: Read>(mut r: R) -> Result<(Tensor, DType)> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let dtype = match head[4] {
        0 => DType::F32,
        1 => DType::F64,
        b => return Err(Error::Format(format!("unknown dtype byte {b}"))),
    };
    let mut dims = Vec::with_capacity(head[5] as usize);
    for _ in 0..head[5] {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dim overflow".into()))?);
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format("element count overflow".into()))?;
    let mut data = Vec::with_capacity(n);
    match dtype {
        DType::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
        }
        DType::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?, dtype))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t, dtype)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(read_tensor(f)?.0)
}
