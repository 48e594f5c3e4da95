//! Minimal self-describing binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TNSR" | version: u16 | dtype: u8 | ndim: u8 | shape: ndim x u64 | payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = complex64 stored as interleaved f32
//! (re, im) pairs. The payload is row-major with exactly
//! `product(shape) * dtype_size` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex32;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    Complex64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Complex64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::Complex64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Complex64(Vec<Complex32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::Complex64(v) => v.len(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::Complex64(_) => DType::Complex64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements but payload has {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format("too many dimensions".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: TensorData::F64(a.iter().copied().collect()),
        }
    }

    pub fn from_complex<D: ndarray::Dimension>(a: &ndarray::Array<num_complex::Complex64, D>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: TensorData::Complex64(
                a.iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect(),
            ),
        }
    }

    /// Real payload widened to f64. Complex tensors are rejected.
    pub fn to_f64(&self) -> Result<ArrayD<f64>> {
        let v: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::Complex64(_) => {
                return Err(Error::Format("expected a real tensor, found complex64".into()))
            }
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), v).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_complex(&self) -> Result<ArrayD<num_complex::Complex64>> {
        let v: Vec<num_complex::Complex64> = match &self.data {
            TensorData::Complex64(v) => v
                .iter()
                .map(|z| num_complex::Complex64::new(z.re as f64, z.im as f64))
                .collect(),
            TensorData::F32(v) => v.iter().map(|&x| (x as f64).into()).collect(),
            TensorData::F64(v) => v.iter().map(|&x| x.into()).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), v).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.data.dtype() as u8, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::Complex64(v) => {
                for z in v {
                    w.write_all(&z.re.to_le_bytes())?;
                    w.write_all(&z.im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        r.read_exact(&mut b2)?;
        let dtype = DType::from_code(b2[0])?;
        let ndim = b2[1] as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut b8 = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut b8)?;
            shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("shape product overflows".into()))?;
        let mut payload = vec![0u8; n.checked_mul(dtype.size()).ok_or_else(|| Error::Format("payload too large".into()))?];
        r.read_exact(&mut payload)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::Complex64 => TensorData::Complex64(
                payload
                    .chunks_exact(8)
                    .map(|c| {
                        Complex32::new(
                            f32::from_le_bytes(c[..4].try_into().unwrap()),
                            f32::from_le_bytes(c[4..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
        };
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let t = Self::read_from(&mut r)?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after tensor payload".into()));
        }
        Ok(t)
    }
}
