//! Dense row-major matrices, the numeric carrier for every module.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Storage width of a tensor's elements on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::F64),
            other => Err(Error::Parse(format!("unknown precision tag {other}"))),
        }
    }
}

/// Element type of the numeric core. Training uses `f32`, test oracles `f64`.
pub trait Scalar:
    num_traits::Float
    + fmt::Debug
    + fmt::Display
    + Default
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix. All public constructors and operations keep
/// every entry finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub const TENSOR_MAGIC: &[u8; 4] = b"TSG1";

impl<T: Scalar> Tensor2D<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                op: "tensor",
                rows,
                cols,
            });
        }
        if data.len() != rows * cols {
            return Err(Error::Evaluation(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        let t = Tensor2D { rows, cols, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        if rows.iter().any(|v| v.len() != c) {
            return Err(Error::Evaluation("ragged row lengths".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
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

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(lhs) {
                    *d = *d + a * b;
                }
            }
        }
        Ok(out)
    }

    /// Elementwise combine with broadcasting: an operand dimension may be 1
    /// where the other's is larger.
    pub fn broadcast_zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let (rows, cols) = broadcast_shape(self.shape(), other.shape()).ok_or(Error::ShapeMismatch {
            op,
            lhs_rows: self.rows,
            lhs_cols: self.cols,
            rhs_rows: other.rows,
            rhs_cols: other.cols,
        })?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let ra = if self.rows == 1 { 0 } else { r };
            let rb = if other.rows == 1 { 0 } else { r };
            for c in 0..cols {
                let ca = if self.cols == 1 { 0 } else { c };
                let cb = if other.cols == 1 { 0 } else { c };
                data.push(f(self.get(ra, ca), other.get(rb, cb)));
            }
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Sum a gradient down to `shape` by collapsing axes that were broadcast.
    pub fn reduce_to(&self, shape: (usize, usize)) -> Self {
        let (rows, cols) = shape;
        if (self.rows, self.cols) == shape {
            return self.clone();
        }
        let mut out = Self::zeros(rows, cols);
        for r in 0..self.rows {
            let tr = if rows == 1 { 0 } else { r };
            for c in 0..self.cols {
                let tc = if cols == 1 { 0 } else { c };
                let v = out.get(tr, tc) + self.get(r, c);
                out.set(tr, tc, v);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Serialize in the shared binary tensor layout: magic "TSG1", u32 rows,
    /// u32 cols, u8 precision tag, row-major little-endian values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&[T::PRECISION.tag()])?;
        match T::PRECISION {
            Precision::F32 => {
                for v in &self.data {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                }
            }
            Precision::F64 => {
                for v in &self.data {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`write_to`](Self::write_to). Widening f32 -> f64 is
    /// allowed; narrowing is refused.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Parse("bad tensor magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let stored = Precision::from_tag(tag[0])?;
        if stored == Precision::F64 && T::PRECISION == Precision::F32 {
            return Err(Error::Parse(
                "tensor stored as f64 cannot be loaded into an f32 model".into(),
            ));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Parse("tensor size overflow".into()))?;
        let mut data = Vec::with_capacity(n);
        match stored {
            Precision::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
                }
            }
            Precision::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(T::from_f64(f64::from_le_bytes(buf)));
                }
            }
        }
        Self::new(rows, cols, data)
    }
}

pub fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_identity() {
        let m = Tensor2D::<f64>::from_rows(&[vec![3.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let i = Tensor2D::identity(2);
        assert_eq!(i.matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&i).unwrap(), m);
    }

    #[test]
    fn matmul_by_hand() {
        let a = Tensor2D::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor2D::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor2D::<f64>::zeros(2, 3);
        let b = Tensor2D::<f64>::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor2D::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn broadcast_outer_sum() {
        let a = Tensor2D::<f64>::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Tensor2D::from_rows(&[vec![10.0, 20.0, 30.0]]).unwrap();
        let s = a.broadcast_zip(&b, "add", |x, y| x + y).unwrap();
        assert_eq!(s.shape(), (2, 3));
        assert_eq!(s.row(1), &[12.0, 22.0, 32.0]);
    }

    #[test]
    fn reduce_to_undoes_broadcast() {
        let g = Tensor2D::<f64>::full(2, 3, 1.0);
        let r = g.reduce_to((1, 3));
        assert_eq!(r.data(), &[2.0, 2.0, 2.0]);
        let r = g.reduce_to((2, 1));
        assert_eq!(r.data(), &[3.0, 3.0]);
        let r = g.reduce_to((1, 1));
        assert_eq!(r.data(), &[6.0]);
    }

    #[test]
    fn binary_round_trip_f64() {
        let t = Tensor2D::<f64>::from_rows(&[vec![1.5, -2.25], vec![0.1, 7.0]]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor2D::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn f64_blob_refused_by_f32_reader() {
        let t = Tensor2D::<f64>::full(1, 1, 0.3);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert!(Tensor2D::<f32>::read_from(&mut buf.as_slice()).is_err());
    }
}
