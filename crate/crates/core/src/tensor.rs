//! Dense numeric core: row-major `f32` matrices and 4-D latents, a
//! deterministic matmul, masked row softmax, and the PBT1 file format.
//!
//! Compute paths keep `f32` storage and accumulate in `f64`.

use std::fs;
use std::path::Path;

use crate::error::{invalid, shape, Error, FormatError, Result};

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Stacks matrices vertically. All inputs must share `cols`.
    pub fn vstack(cols: usize, parts: &[&DenseMatrix]) -> Result<Self> {
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(shape(format!("vstack: expected {cols} cols, got {}", p.cols)));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// A `t × h × w × d` latent stored row-major in `(t, h, w, d)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent4D {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    data: Vec<f32>,
}

impl Latent4D {
    pub fn new(t: usize, h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        let n = [t, h, w, d]
            .iter()
            .try_fold(1usize, |acc, &x| acc.checked_mul(x))
            .ok_or_else(|| shape("latent dims overflow"))?;
        if n != data.len() {
            return Err(shape(format!(
                "latent {t}x{h}x{w}x{d} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { t, h, w, d, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize, d: usize) -> Self {
        Self {
            t,
            h,
            w,
            d,
            data: vec![0.0; t * h * w * d],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.d]
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Matrix product with `f64` accumulation in ascending inner-index order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = f64::from(a.data[i * k + p]);
            let brow = &b.data[p * m..(p + 1) * m];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += aip * f64::from(bv);
            }
        }
        out.extend(acc.iter().map(|&x| x as f32));
    }
    Ok(DenseMatrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Row-wise softmax of `scores + mask`.
///
/// Mask entries must be `0` or `-inf`. Rows with no visible entry come back
/// as all zeros instead of NaN.
pub fn masked_softmax_rows(scores: &DenseMatrix, mask: Option<&DenseMatrix>) -> Result<DenseMatrix> {
    if let Some(m) = mask {
        if m.rows != scores.rows || m.cols != scores.cols {
            return Err(shape(format!(
                "mask {}x{} vs scores {}x{}",
                m.rows, m.cols, scores.rows, scores.cols
            )));
        }
        if let Some(bad) = m.data.iter().find(|&&x| !(x == 0.0 || x == f32::NEG_INFINITY)) {
            return Err(invalid(format!("mask entry {bad} is neither 0 nor -inf")));
        }
    }
    if scores.data.iter().any(|x| x.is_nan() || *x == f32::INFINITY) {
        return Err(invalid("scores contain NaN or +inf"));
    }

    let cols = scores.cols;
    let mut out = vec![0.0f32; scores.data.len()];
    let mut shifted = vec![0.0f64; cols];
    for r in 0..scores.rows {
        let row = &scores.data[r * cols..(r + 1) * cols];
        for (c, s) in shifted.iter_mut().enumerate() {
            let m = mask.map_or(0.0, |m| m.data[r * cols + c]);
            *s = f64::from(row[c]) + f64::from(m);
        }
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0f64;
        for s in shifted.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (o, s) in out[r * cols..(r + 1) * cols].iter_mut().zip(&shifted) {
            *o = (*s / sum) as f32;
        }
    }
    Ok(DenseMatrix {
        rows: scores.rows,
        cols,
        data: out,
    })
}

/// A decoded PBT1 tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Matrix(DenseMatrix),
    Latent(Latent4D),
}

impl From<DenseMatrix> for Tensor {
    fn from(m: DenseMatrix) -> Self {
        Tensor::Matrix(m)
    }
}

impl From<Latent4D> for Tensor {
    fn from(x: Latent4D) -> Self {
        Tensor::Latent(x)
    }
}

const MAGIC: &[u8; 4] = b"PBT1";
const DTYPE_F32: u8 = 0x01;

fn encode_raw(dims: &[usize], data: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(6 + dims.len() * 8 + data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(DTYPE_F32);
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    match tensor {
        Tensor::Matrix(m) => encode_raw(&[m.rows, m.cols], &m.data),
        Tensor::Latent(x) => encode_raw(&x.dims(), &x.data),
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        return Err(FormatError::TruncatedHeader {
            needed: 6,
            available: bytes.len(),
        }
        .into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    if bytes[4] != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(bytes[4]).into());
    }
    let rank = bytes[5];
    let header = 6 + usize::from(rank) * 8;
    if bytes.len() < header {
        return Err(FormatError::TruncatedHeader {
            needed: header,
            available: bytes.len(),
        }
        .into());
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    // A rank-0 header claims no payload at all.
    let elements = if dims.is_empty() {
        0
    } else {
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(FormatError::DimensionOverflow)?
    };
    let expected = elements
        .checked_mul(4)
        .ok_or(FormatError::DimensionOverflow)?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload {
            needed: expected,
            available: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes {
            expected,
            extra: payload.len() - expected,
        }
        .into());
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    match dims[..] {
        [rows, cols] => Ok(Tensor::Matrix(DenseMatrix { rows, cols, data })),
        [t, h, w, d] => Ok(Tensor::Latent(Latent4D { t, h, w, d, data })),
        _ => Err(FormatError::UnsupportedRank(rank).into()),
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(tensor))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    match read_tensor(path)? {
        Tensor::Matrix(m) => Ok(m),
        Tensor::Latent(_) => Err(Error::InvalidInput("expected a rank-2 tensor".into())),
    }
}
