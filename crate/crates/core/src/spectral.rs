//! 2D discrete Fourier transforms and quadrant shifts over the last two axes.
//!
//! Normalization is fixed crate-wide: the forward transform is unscaled and
//! the inverse is scaled by `1 / (H * W)`. Arbitrary sizes are supported
//! (rustfft picks mixed-radix, Rader or Bluestein plans per length).

use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{NiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, SpectrumMap};

/// Precomputed row/column plans for one `(H, W)` plane size.
pub struct Fft2<T: Scalar> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scratch_len: usize,
}

impl<T: Scalar> Clone for Fft2<T> {
    fn clone(&self) -> Self {
        Fft2 {
            height: self.height,
            width: self.width,
            row_fwd: Arc::clone(&self.row_fwd),
            row_inv: Arc::clone(&self.row_inv),
            col_fwd: Arc::clone(&self.col_fwd),
            col_inv: Arc::clone(&self.col_inv),
            scratch_len: self.scratch_len,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

/// Per-worker buffers for [`Fft2`].
pub struct Fft2Scratch<T> {
    transpose: Vec<Complex<T>>,
    fft: Vec<Complex<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "plane must be non-empty");
        let mut planner = FftPlanner::<T>::new();
        let row_fwd = planner.plan_fft_forward(width);
        let row_inv = planner.plan_fft_inverse(width);
        let col_fwd = planner.plan_fft_forward(height);
        let col_inv = planner.plan_fft_inverse(height);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Fft2 {
            height,
            width,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch_len,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scratch(&self) -> Fft2Scratch<T> {
        let zero = Complex::new(T::zero(), T::zero());
        Fft2Scratch {
            transpose: vec![zero; self.height * self.width],
            fft: vec![zero; self.scratch_len],
        }
    }

    fn transform(
        &self,
        plane: &mut [Complex<T>],
        scratch: &mut Fft2Scratch<T>,
        rows: &Arc<dyn Fft<T>>,
        cols: &Arc<dyn Fft<T>>,
    ) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(plane.len(), h * w);
        if w > 1 {
            rows.process_with_scratch(plane, &mut scratch.fft);
        }
        if h > 1 {
            let t = &mut scratch.transpose;
            for y in 0..h {
                for x in 0..w {
                    t[x * h + y] = plane[y * w + x];
                }
            }
            cols.process_with_scratch(t, &mut scratch.fft);
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = t[x * h + y];
                }
            }
        }
    }

    /// Unscaled forward transform of one plane, in place.
    pub fn forward_plane(&self, plane: &mut [Complex<T>], scratch: &mut Fft2Scratch<T>) {
        self.transform(plane, scratch, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform of one plane scaled by `1/(H*W)`, in place.
    pub fn inverse_plane(&self, plane: &mut [Complex<T>], scratch: &mut Fft2Scratch<T>) {
        self.transform(plane, scratch, &self.row_inv, &self.col_inv);
        let scale = T::one() / T::of_usize(self.height * self.width);
        for z in plane.iter_mut() {
            *z = *z * scale;
        }
    }

    /// Forward transform of every plane of a packed `(planes, H, W)` buffer.
    pub fn forward_planes(&self, data: &mut [Complex<T>]) {
        let n = self.height * self.width;
        data.par_chunks_mut(n)
            .for_each_init(|| self.scratch(), |s, p| self.forward_plane(p, s));
    }

    pub fn inverse_planes(&self, data: &mut [Complex<T>]) {
        let n = self.height * self.width;
        data.par_chunks_mut(n)
            .for_each_init(|| self.scratch(), |s, p| self.inverse_plane(p, s));
    }

    /// Unscaled forward transform of a real feature map.
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<SpectrumMap<T>> {
        let shape = x.shape();
        self.check(shape.height, shape.width)?;
        x.ensure_finite("fft2 input")?;
        let mut data: Vec<Complex<T>> = x
            .data()
            .iter()
            .map(|&v| Complex::new(v, T::zero()))
            .collect();
        self.forward_planes(&mut data);
        SpectrumMap::from_vec(shape, data, false)
    }

    /// Scaled inverse transform; keeps the real part.
    pub fn inverse(&self, s: &SpectrumMap<T>) -> Result<InverseTransform<T>> {
        if s.is_shifted() {
            return Err(NiffError::ShiftState("unshift before inverse transform"));
        }
        let shape = s.shape();
        self.check(shape.height, shape.width)?;
        let mut data = s.data().to_vec();
        self.inverse_planes(&mut data);
        let mut residue = T::zero();
        let re = data
            .iter()
            .map(|z| {
                residue = residue.max(z.im.abs());
                z.re
            })
            .collect();
        Ok(InverseTransform {
            output: FeatureMap::from_vec(shape, re)?,
            imag_residue: residue,
        })
    }

    /// Scaled inverse transform keeping the full complex result.
    pub fn inverse_complex(&self, s: &SpectrumMap<T>) -> Result<SpectrumMap<T>> {
        if s.is_shifted() {
            return Err(NiffError::ShiftState("unshift before inverse transform"));
        }
        let shape = s.shape();
        self.check(shape.height, shape.width)?;
        let mut data = s.data().to_vec();
        self.inverse_planes(&mut data);
        SpectrumMap::from_vec(shape, data, false)
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h != self.height || w != self.width {
            return Err(NiffError::shape(format!(
                "plan is {}x{}, input plane is {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Result of [`ifft2`]: the real part plus the largest discarded imaginary
/// magnitude.
#[derive(Debug, Clone)]
pub struct InverseTransform<T> {
    pub output: FeatureMap<T>,
    pub imag_residue: T,
}

/// Unscaled forward 2D DFT over the last two axes.
pub fn fft2<T: Scalar>(x: &FeatureMap<T>) -> Result<SpectrumMap<T>> {
    let shape = x.shape();
    Fft2::new(shape.height, shape.width).forward(x)
}

/// Inverse 2D DFT scaled by `1/(H*W)`. Input must be unshifted.
pub fn ifft2<T: Scalar>(s: &SpectrumMap<T>) -> Result<InverseTransform<T>> {
    let shape = s.shape();
    Fft2::new(shape.height, shape.width).inverse(s)
}

/// Cyclic roll of one plane: `out[(y + dy) % h][(x + dx) % w] = src[y][x]`.
pub fn roll_plane<V: Copy>(src: &[V], dst: &mut [V], h: usize, w: usize, dy: usize, dx: usize) {
    debug_assert_eq!(src.len(), h * w);
    debug_assert_eq!(dst.len(), h * w);
    for y in 0..h {
        let ty = (y + dy) % h;
        let split = w - dx % w;
        let row = &src[y * w..(y + 1) * w];
        let out = &mut dst[ty * w..(ty + 1) * w];
        // row[x] lands at (x + dx) % w
        out[dx % w..].copy_from_slice(&row[..split]);
        out[..dx % w].copy_from_slice(&row[split..]);
    }
}

/// Rolls every plane of a packed buffer by `(dy, dx)`.
pub fn roll_planes<V: Copy + Default>(
    data: &[V],
    h: usize,
    w: usize,
    dy: usize,
    dx: usize,
) -> Vec<V> {
    let n = h * w;
    let mut out = vec![V::default(); data.len()];
    for (src, dst) in data.chunks(n).zip(out.chunks_mut(n)) {
        roll_plane(src, dst, h, w, dy, dx);
    }
    out
}

/// Moves the DC bin to `(H/2, W/2)` (roll by `floor(H/2), floor(W/2)`).
pub fn fftshift2<T: Scalar>(s: &SpectrumMap<T>) -> Result<SpectrumMap<T>> {
    if s.is_shifted() {
        return Err(NiffError::ShiftState("spectrum is already shifted"));
    }
    let shape = s.shape();
    let (h, w) = (shape.height, shape.width);
    let data = roll_planes(s.data(), h, w, h / 2, w / 2);
    SpectrumMap::from_vec(shape, data, true)
}

/// Inverse of [`fftshift2`] (roll by `ceil(H/2), ceil(W/2)`).
pub fn ifftshift2<T: Scalar>(s: &SpectrumMap<T>) -> Result<SpectrumMap<T>> {
    if !s.is_shifted() {
        return Err(NiffError::ShiftState("spectrum is not shifted"));
    }
    let shape = s.shape();
    let (h, w) = (shape.height, shape.width);
    let data = roll_planes(s.data(), h, w, h.div_ceil(2), w.div_ceil(2));
    SpectrumMap::from_vec(shape, data, false)
}
