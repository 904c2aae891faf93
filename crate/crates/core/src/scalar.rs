//! The scalar abstraction every numeric routine in the crate is generic over.
//!
//! Training runs in `f32`; oracle and gradient checks run in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Element type tag used by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

pub trait Scalar:
    Float
    + FloatConst
    + FftNum
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from `f64`; exact for `f64`.
    fn of(v: f64) -> Self;

    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }

    fn to_f64_lossy(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE.size()` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;

    /// Gauss error function, evaluated in double precision.
    fn erf(self) -> Self {
        Self::of(libm::erf(self.to_f64_lossy()))
    }

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// explicit row/column strides (see [`Mat`]).
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>);
}

/// Read-only strided matrix view.
#[derive(Debug, Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> Mat<'a, T> {
    /// Row-major `rows x cols`.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Mat {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Mat {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn span(&self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.row_stride + (c - 1) * self.col_stride + 1
        }
    }
}

#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub row_stride: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn rows(data: &'a mut [T], cols: usize) -> Self {
        MatMut { data, row_stride: cols }
    }
}

macro_rules! checked_gemm {
    ($f:path, $m:expr, $k:expr, $n:expr, $alpha:expr, $a:expr, $b:expr, $beta:expr, $c:expr) => {{
        let (m, k, n) = ($m, $k, $n);
        let (a, b, c) = ($a, $b, $c);
        assert!(a.data.len() >= a.span(m, k), "gemm: A too short");
        assert!(b.data.len() >= b.span(k, n), "gemm: B too short");
        assert!(c.row_stride >= n && c.data.len() >= if m == 0 { 0 } else { (m - 1) * c.row_stride + n });
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: the spans checked above cover every element the kernel
        // touches, and `c` is a unique borrow.
        unsafe {
            $f(
                m,
                k,
                n,
                $alpha,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                $beta,
                c.data.as_mut_ptr(),
                c.row_stride as isize,
                1,
            )
        }
    }};
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
        checked_gemm!(matrixmultiply::sgemm, m, k, n, alpha, a, b, beta, c)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
        checked_gemm!(matrixmultiply::dgemm, m, k, n, alpha, a, b, beta, c)
    }
}
