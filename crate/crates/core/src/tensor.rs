//! Dense row-major f64 tensors and the `TPNC` binary container.
//!
//! Layout: magic `b"TPNC"`, version byte `0x01`, `u8` rank, `rank` little-endian
//! `u64` dimensions, `u8` dtype code (`0x01` = IEEE-754 binary64 little-endian),
//! then the payload in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{NicaError, Result};

pub const MAGIC: &[u8; 4] = b"TPNC";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F64: u8 = 0x01;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(NicaError::Dimension(format!(
                "shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(NicaError::Dimension("rank exceeds 255".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Tensor { shape, data: vec![0.0; count] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major matrix view of `self[index]` for a rank-3 tensor.
    pub fn matrix(&self, index: usize) -> DMatrix<f64> {
        assert_eq!(self.shape.len(), 3, "matrix() needs a rank-3 tensor");
        let (r, c) = (self.shape[1], self.shape[2]);
        let start = index * r * c;
        DMatrix::from_row_slice(r, c, &self.data[start..start + r * c])
    }

    /// Writes `m` into `self[index]` of a rank-3 tensor.
    pub fn set_matrix(&mut self, index: usize, m: &DMatrix<f64>) {
        assert_eq!(self.shape.len(), 3);
        let (r, c) = (self.shape[1], self.shape[2]);
        assert_eq!(m.shape(), (r, c));
        let start = index * r * c;
        for i in 0..r {
            for j in 0..c {
                self.data[start + i * c + j] = m[(i, j)];
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(NicaError::Format("truncated tensor file".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(NicaError::Format("bad magic".into()));
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(NicaError::Format(format!("unsupported version {version:#04x}")));
        }
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            shape.push(usize::try_from(d).map_err(|_| NicaError::Format("dimension overflow".into()))?);
        }
        let dtype = take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(NicaError::Format(format!("unsupported dtype {dtype:#04x}")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NicaError::Format("element count overflow".into()))?;
        let payload = take(count.checked_mul(8).ok_or_else(|| NicaError::Format("size overflow".into()))?)?;
        if !cur.is_empty() {
            return Err(NicaError::Format(format!("{} trailing bytes", cur.len())));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Tensor::from_bytes(&buf)
    }
}
