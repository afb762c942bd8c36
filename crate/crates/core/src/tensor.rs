//! Dense row-major tensors and the linear-algebra kernels the adapters use.
//!
//! Everything here is single-threaded and accumulates each output element in
//! a fixed order, so results are bit-identical across runs on one platform.
//!
//! Binary format (`DBT1`), all integers little-endian:
//!
//! ```text
//! magic   "DBT1"            4 bytes
//! dtype   u8                0 = f32, 1 = f64
//! rank    u8
//! dims    u64 * rank
//! data    element * prod(dims), little-endian IEEE-754
//! ```

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DBT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!(
                "unknown dtype {other:?} (expected \"f32\" or \"f64\")"
            ))),
        }
    }
}

/// Floating-point element types a [`Tensor`] can hold.
pub trait Element:
    Float + AddAssign + SubAssign + MulAssign + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()>;
    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self>;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }
}

/// Accumulator precision for reductions inside matrix products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// Accumulate in the operand type.
    #[default]
    Native,
    /// Accumulate in f64 and round once on output.
    Wide,
}

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config(format!(
            "tensor shape {shape:?} must be non-empty with positive dimensions"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero or empty shape; use [`Tensor::new`] for fallible construction.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Builds a rank-2 tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data).expect("invalid matrix")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .zip(self.strides())
            .map(|((&i, &d), s)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Returns `(rows, cols)` or a rank error.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Rank {
                op,
                expected: 2,
                got: self.rank(),
            }),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::Rank {
                op,
                expected: 3,
                got: self.rank(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape("add", other)?;
        let out = self.zip_map(other, |a, b| a + b)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape("sub", other)?;
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        matmul_with(self, rhs, Accumulation::Native)
    }

    pub fn transpose(&self) -> Result<Self> {
        transpose(self)
    }

    /// Copies a rank-2 tensor into a wider one, appending zero columns.
    pub fn pad_cols(&self, cols: usize) -> Result<Self> {
        let (r, c) = self.dims2("pad_cols")?;
        if cols < c {
            return Err(Error::Shape {
                op: "pad_cols",
                left: self.shape.clone(),
                right: vec![r, cols],
            });
        }
        if cols == c {
            return Ok(self.clone());
        }
        let mut out = Self::zeros(&[r, cols]);
        for i in 0..r {
            out.data[i * cols..i * cols + c].copy_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(out)
    }

    /// Keeps the leading `cols` columns of a rank-2 tensor.
    pub fn take_cols(&self, cols: usize) -> Result<Self> {
        let (r, c) = self.dims2("take_cols")?;
        if cols > c || cols == 0 {
            return Err(Error::Shape {
                op: "take_cols",
                left: self.shape.clone(),
                right: vec![r, cols],
            });
        }
        if cols == c {
            return Ok(self.clone());
        }
        let mut out = Self::zeros(&[r, cols]);
        for i in 0..r {
            out.data[i * cols..(i + 1) * cols].copy_from_slice(&self.data[i * c..i * c + cols]);
        }
        Ok(out)
    }

    /// Selects rows of a rank-2 tensor by index.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Shape {
                    op: "gather_rows",
                    left: self.shape.clone(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Self::new(vec![rows.len(), c], data)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        let rank = u8::try_from(self.rank())
            .map_err(|_| Error::Format(format!("rank {} exceeds 255", self.rank())))?;
        w.write_all(&[T::DTYPE.code(), rank])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            v.write_le(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let dtype = DType::from_code(head[0])?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor holds {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let mut shape = Vec::with_capacity(head[1] as usize);
        for _ in 0..head[1] {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            let d = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| Error::Format("dimension overflows usize".into()))?;
            shape.push(d);
        }
        let n = check_shape(&shape).map_err(|e| Error::Format(e.to_string()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::read_le(r)?);
        }
        Self::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(6 + 8 * self.rank() + self.len() * T::DTYPE.size());
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }
}

/// Matrix product of `a [p×q]` and `b [q×s]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_with(a, b, Accumulation::Native)
}

pub fn matmul_with<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    acc: Accumulation,
) -> Result<Tensor<T>> {
    let (p, q) = a.dims2("matmul")?;
    let (q2, s) = b.dims2("matmul")?;
    if q != q2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[p, s]);
    match acc {
        Accumulation::Native => {
            for i in 0..p {
                let row = &mut out.data[i * s..(i + 1) * s];
                for k in 0..q {
                    let aik = a.data[i * q + k];
                    let brow = &b.data[k * s..(k + 1) * s];
                    for (o, &bkj) in row.iter_mut().zip(brow) {
                        *o += aik * bkj;
                    }
                }
            }
        }
        Accumulation::Wide => {
            let mut acc_row = vec![0.0f64; s];
            for i in 0..p {
                acc_row.fill(0.0);
                for k in 0..q {
                    let aik = a.data[i * q + k].as_f64();
                    let brow = &b.data[k * s..(k + 1) * s];
                    for (o, &bkj) in acc_row.iter_mut().zip(brow) {
                        *o += aik * bkj.as_f64();
                    }
                }
                for (o, &v) in out.data[i * s..(i + 1) * s].iter_mut().zip(&acc_row) {
                    *o = T::from_f64(v);
                }
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` for `a [p×q]`, `b [p×s]`, without forming the transpose.
///
/// The reduction runs over the long batch axis, so it accumulates in f64
/// (see [`Accumulation::Wide`]).
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.dims2("matmul_tn")?;
    let (p2, s) = b.dims2("matmul_tn")?;
    if p != p2 {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut acc = vec![0.0f64; q * s];
    for k in 0..p {
        let brow = &b.data[k * s..(k + 1) * s];
        for i in 0..q {
            let aki = a.data[k * q + i].as_f64();
            let row = &mut acc[i * s..(i + 1) * s];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aki * bkj.as_f64();
            }
        }
    }
    Tensor::new(vec![q, s], acc.into_iter().map(T::from_f64).collect())
}

/// `a · bᵀ` for `a [p×q]`, `b [s×q]`, without forming the transpose.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.dims2("matmul_nt")?;
    let (s, q2) = b.dims2("matmul_nt")?;
    if q != q2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[p, s]);
    for i in 0..p {
        let arow = &a.data[i * q..(i + 1) * q];
        for j in 0..s {
            let brow = &b.data[j * q..(j + 1) * q];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.data[i * s + j] = acc;
        }
    }
    Ok(out)
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.dims2("transpose")?;
    let mut out = Tensor::zeros(&[q, p]);
    for i in 0..p {
        for j in 0..q {
            out.data[j * p + i] = a.data[i * q + j];
        }
    }
    Ok(out)
}

/// Per-block product: `out[i, n, :] = x[i, n, :] · d[n, :, :]`.
///
/// `x` is `[b×N×d₁]`, `d` is `[N×d₁×d₂]`, the result is `[b×N×d₂]`.
pub fn batched_matmul<T: Element>(x: &Tensor<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, d1) = x.dims3("batched_matmul")?;
    let (n2, d1b, d2) = d.dims3("batched_matmul")?;
    if n != n2 || d1 != d1b {
        return Err(Error::Shape {
            op: "batched_matmul",
            left: x.shape.clone(),
            right: d.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[b, n, d2]);
    for i in 0..b {
        for blk in 0..n {
            let xrow = &x.data[(i * n + blk) * d1..(i * n + blk + 1) * d1];
            let orow = &mut out.data[(i * n + blk) * d2..(i * n + blk + 1) * d2];
            let dblk = &d.data[blk * d1 * d2..(blk + 1) * d1 * d2];
            for (k, &xv) in xrow.iter().enumerate() {
                for (o, &dv) in orow.iter_mut().zip(&dblk[k * d2..(k + 1) * d2]) {
                    *o += xv * dv;
                }
            }
        }
    }
    Ok(out)
}

/// Per-block product against transposed blocks: `out[i, n, :] = g[i, n, :] · d[n]ᵀ`.
///
/// `g` is `[b×N×d₂]`, `d` is `[N×d₁×d₂]`, the result is `[b×N×d₁]`.
pub fn batched_matmul_bt<T: Element>(g: &Tensor<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, d2) = g.dims3("batched_matmul_bt")?;
    let (n2, d1, d2b) = d.dims3("batched_matmul_bt")?;
    if n != n2 || d2 != d2b {
        return Err(Error::Shape {
            op: "batched_matmul_bt",
            left: g.shape.clone(),
            right: d.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[b, n, d1]);
    for i in 0..b {
        for blk in 0..n {
            let grow = &g.data[(i * n + blk) * d2..(i * n + blk + 1) * d2];
            let dblk = &d.data[blk * d1 * d2..(blk + 1) * d1 * d2];
            for k in 0..d1 {
                let mut acc = T::zero();
                for (&gv, &dv) in grow.iter().zip(&dblk[k * d2..(k + 1) * d2]) {
                    acc += gv * dv;
                }
                out.data[(i * n + blk) * d1 + k] = acc;
            }
        }
    }
    Ok(out)
}

/// Contraction over the batch axis: `out[n] = x[:, n, :]ᵀ · g[:, n, :]`.
///
/// `x` is `[b×N×d₁]`, `g` is `[b×N×d₂]`, the result is `[N×d₁×d₂]`.
/// Accumulates in f64 like [`matmul_tn`].
pub fn batched_matmul_at<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, d1) = x.dims3("batched_matmul_at")?;
    let (b2, n2, d2) = g.dims3("batched_matmul_at")?;
    if b != b2 || n != n2 {
        return Err(Error::Shape {
            op: "batched_matmul_at",
            left: x.shape.clone(),
            right: g.shape.clone(),
        });
    }
    let mut acc = vec![0.0f64; n * d1 * d2];
    for i in 0..b {
        for blk in 0..n {
            let xrow = &x.data[(i * n + blk) * d1..(i * n + blk + 1) * d1];
            let grow = &g.data[(i * n + blk) * d2..(i * n + blk + 1) * d2];
            let oblk = &mut acc[blk * d1 * d2..(blk + 1) * d1 * d2];
            for (k, &xv) in xrow.iter().enumerate() {
                let xv = xv.as_f64();
                for (o, &gv) in oblk[k * d2..(k + 1) * d2].iter_mut().zip(grow) {
                    *o += xv * gv.as_f64();
                }
            }
        }
    }
    Tensor::new(vec![n, d1, d2], acc.into_iter().map(T::from_f64).collect())
}
