//! Dense row-major `f64` tensors and the FDLT binary file format.
//!
//! FDLT layout: the magic `FDLT`, one byte holding the rank, `rank` little-endian
//! `u64` dimensions, then the row-major payload as little-endian IEEE-754 doubles.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FDLT_MAGIC: &[u8; 4] = b"FDLT";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::InvalidSize(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index. Panics on out-of-range indices.
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range for dimension {d}");
            acc * d + i
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn write_fdlt<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "rank exceeds 255",
            ));
        }
        let mut buf = Vec::with_capacity(5 + 8 * self.shape.len() + 8 * self.data.len());
        buf.extend_from_slice(FDLT_MAGIC);
        buf.push(self.shape.len() as u8);
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn from_fdlt_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: &str| Error::Format {
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 5 {
            return Err(fmt(bytes.len(), "truncated FDLT header"));
        }
        if &bytes[..4] != FDLT_MAGIC {
            return Err(fmt(0, "bad magic, expected FDLT"));
        }
        let rank = bytes[4] as usize;
        let mut pos = 5;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes
                .get(pos..pos + 8)
                .ok_or_else(|| fmt(pos, "truncated dimension list"))?;
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            if d == 0 {
                return Err(fmt(pos, "zero dimension"));
            }
            shape.push(usize::try_from(d).map_err(|_| fmt(pos, "dimension overflow"))?);
            pos += 8;
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fmt(5, "element count overflow"))?;
        let payload = numel
            .checked_mul(8)
            .ok_or_else(|| fmt(5, "element count overflow"))?;
        if bytes.len() < pos + payload {
            return Err(fmt(bytes.len(), "truncated payload"));
        }
        if bytes.len() > pos + payload {
            return Err(fmt(pos + payload, "trailing bytes after payload"));
        }
        let data = bytes[pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn read_fdlt<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<reader>", e))?;
        Self::from_fdlt_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_fdlt(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::fsio::write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_fdlt_bytes(&bytes)
    }
}
