//! Dense batch tensors: real feature maps and complex spectra.

use num_complex::Complex;

use crate::error::{NiffError, Result};
use crate::scalar::Scalar;

/// `(batch, channels, height, width)`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape4 {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn planes(&self) -> usize {
        self.batch * self.channels
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Shape4 { channels, ..*self }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(NiffError::shape(format!(
                "every axis must be at least 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Real-valued `(B, C, H, W)` signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(shape: Shape4) -> Self {
        FeatureMap {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(NiffError::shape(format!(
                "data length {} does not match {:?} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        FeatureMap { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, y, x)]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NiffError::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

/// Complex `(B, C, H, W)` spectrum. `shifted` marks center-shifted layout
/// (DC bin at `(H/2, W/2)`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMap<T> {
    shape: Shape4,
    data: Vec<Complex<T>>,
    shifted: bool,
}

impl<T: Scalar> SpectrumMap<T> {
    pub fn zeros(shape: Shape4, shifted: bool) -> Self {
        SpectrumMap {
            shape,
            data: vec![Complex::new(T::zero(), T::zero()); shape.len()],
            shifted,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<Complex<T>>, shifted: bool) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(NiffError::shape(format!(
                "spectrum length {} does not match {:?}",
                data.len(),
                shape
            )));
        }
        Ok(SpectrumMap {
            shape,
            data,
            shifted,
        })
    }

    pub fn from_parts(shape: Shape4, re: &[T], im: &[T], shifted: bool) -> Result<Self> {
        if re.len() != im.len() {
            return Err(NiffError::shape("re and im lengths differ"));
        }
        let data = re
            .iter()
            .zip(im)
            .map(|(&r, &i)| Complex::new(r, i))
            .collect();
        Self::from_vec(shape, data, shifted)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn re(&self) -> Vec<T> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn im(&self) -> Vec<T> {
        self.data.iter().map(|z| z.im).collect()
    }

    pub fn plane(&self, b: usize, c: usize) -> &[Complex<T>] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [Complex<T>] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).norm()))
    }
}
