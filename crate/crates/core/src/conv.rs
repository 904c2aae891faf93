//! Frequency-domain convolutions driven by synthesized filter banks, the
//! spatial strided fallback, and their reverse-mode adjoints.
//!
//! All spectral ops implement circular convolution: each plane is transformed,
//! multiplied bin-wise by the (unshifted) bank and transformed back, keeping
//! the real part. Multiplying a shifted spectrum by a shifted bank and then
//! unshifting is the same permutation as multiplying both unshifted, so banks
//! are unshifted once per call instead of shifting every feature plane.
//!
//! Adjoint conventions, for a real loss `L` and complex `z`: the cotangent
//! `g` satisfies `dL = Re(sum(conj(g) * dz))`. Under the forward-unscaled DFT
//! `F`, the adjoint of `Re(F^-1 z)` is `F(g) / (H*W)` and the adjoint of `F`
//! restricted to real inputs is `Re((H*W) F^-1 g)`.

use num_complex::Complex;
use rand::Rng;

use crate::error::{NiffError, Result};
use crate::param::Param;
use crate::scalar::{Mat, MatMut, Scalar};
use crate::spectral::{roll_planes, Fft2};
use crate::synthesis::{CoordinateGrid, MlpGrads, NiffMlp, SpectralFilterBank};
use crate::tensor::{FeatureMap, Shape4};

type Cx<T> = Complex<T>;

/// Real channel-mixing matrix (`C_out x C_in`) with an optional bias added in
/// the spatial domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMix<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> ChannelMix<T> {
    pub fn new(c_out: usize, c_in: usize, weight: Vec<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if weight.len() != c_out * c_in {
            return Err(NiffError::shape("mix weight must be c_out * c_in"));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(NiffError::shape("mix bias must have c_out entries"));
            }
        }
        Ok(ChannelMix {
            weight: Param::new(vec![c_out, c_in], weight),
            bias: bias.map(|b| Param::new(vec![c_out], b)),
        })
    }

    pub fn identity(c: usize) -> Self {
        let mut w = vec![T::zero(); c * c];
        for i in 0..c {
            w[i * c + i] = T::one();
        }
        ChannelMix::new(c, c, w, None).expect("square")
    }

    /// Kaiming-uniform weights, zero bias when present.
    pub fn init(c_out: usize, c_in: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / c_in as f64).sqrt();
        let w = (0..c_out * c_in)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        ChannelMix::new(c_out, c_in, w, bias.then(|| vec![T::zero(); c_out])).expect("sized")
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape[1]
    }

    #[inline]
    pub fn w(&self, q: usize, p: usize) -> T {
        self.weight.value[q * self.c_in() + p]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }
}

/// Gradients of a [`ChannelMix`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixGrads<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

/// Spatial kernel, `(C_out, C_in, M, M)` for full convolutions and
/// `(C, 1, M, M)` for depthwise ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernel<T> {
    pub weight: Param<T>,
    pub depthwise: bool,
}

impl<T: Scalar> SpatialKernel<T> {
    pub fn full(c_out: usize, c_in: usize, m: usize, data: Vec<T>) -> Result<Self> {
        Self::build(vec![c_out, c_in, m, m], data, false)
    }

    pub fn depthwise(c: usize, m: usize, data: Vec<T>) -> Result<Self> {
        Self::build(vec![c, 1, m, m], data, true)
    }

    fn build(shape: Vec<usize>, data: Vec<T>, depthwise: bool) -> Result<Self> {
        if shape[2] == 0 {
            return Err(NiffError::invalid("kernel size must be at least 1"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(NiffError::shape(format!(
                "kernel {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NiffError::NonFinite("spatial kernel".into()));
        }
        Ok(SpatialKernel {
            weight: Param::new(shape, data),
            depthwise,
        })
    }

    /// Kaiming-uniform over the receptive field fan-in.
    pub fn init(c_out: usize, c_in: usize, m: usize, depthwise: bool, rng: &mut impl Rng) -> Self {
        let per = if depthwise { 1 } else { c_in };
        let bound = (6.0 / (per * m * m) as f64).sqrt();
        let data = (0..c_out * per * m * m)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        Self::build(vec![c_out, per, m, m], data, depthwise).expect("sized")
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn c_in_per_group(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn size(&self) -> usize {
        self.weight.shape[2]
    }
}

/// Output of a spectral op: the real part and the largest discarded
/// imaginary magnitude.
#[derive(Debug, Clone)]
pub struct SpectralOutput<T> {
    pub output: FeatureMap<T>,
    pub imag_residue: T,
}

/// Forward state kept for the backward pass of a spectral op.
#[derive(Debug, Clone)]
pub struct SpectralCache<T> {
    shape: Shape4,
    /// Unshifted spectra of the input planes.
    spectra: Vec<Cx<T>>,
    /// Depthwise-filtered spectra (decomposed op only).
    filtered: Option<Vec<Cx<T>>>,
}

fn to_complex<T: Scalar>(x: &FeatureMap<T>) -> Vec<Cx<T>> {
    x.data().iter().map(|&v| Cx::new(v, T::zero())).collect()
}

/// Bank channels in unshifted layout.
fn unshifted_bank<T: Scalar>(bank: &SpectralFilterBank<T>) -> Vec<Cx<T>> {
    let (h, w) = (bank.height(), bank.width());
    let packed: Vec<Cx<T>> = bank
        .re()
        .iter()
        .zip(bank.im())
        .map(|(&r, &i)| Cx::new(r, i))
        .collect();
    roll_planes(&packed, h, w, h.div_ceil(2), w.div_ceil(2))
}

/// Packs an unshifted per-channel gradient back into a shifted bank.
fn shifted_bank_grad<T: Scalar>(g: Vec<Cx<T>>, channels: usize, h: usize, w: usize) -> SpectralFilterBank<T> {
    let g = roll_planes(&g, h, w, h / 2, w / 2);
    let re = g.iter().map(|z| z.re).collect();
    let im = g.iter().map(|z| z.im).collect();
    SpectralFilterBank::new(channels, h, w, re, im).expect("sized")
}

fn real_part<T: Scalar>(shape: Shape4, z: &[Cx<T>]) -> SpectralOutput<T> {
    let mut residue = T::zero();
    let data = z
        .iter()
        .map(|v| {
            residue = residue.max(v.im.abs());
            v.re
        })
        .collect();
    SpectralOutput {
        output: FeatureMap::from_vec(shape, data).expect("sized"),
        imag_residue: residue,
    }
}

/// Cotangent of the pre-inverse spectrum: `F(gy) / (H*W)`.
fn spectral_cotangent<T: Scalar>(plan: &Fft2<T>, gy: &FeatureMap<T>) -> Vec<Cx<T>> {
    let mut g = to_complex(gy);
    plan.forward_planes(&mut g);
    let scale = T::one() / T::of_usize(gy.shape().plane());
    g.iter_mut().for_each(|z| *z = *z * scale);
    g
}

/// Input cotangent from a spectrum cotangent: `Re((H*W) F^-1 g)`.
fn input_cotangent<T: Scalar>(plan: &Fft2<T>, shape: Shape4, mut g: Vec<Cx<T>>) -> FeatureMap<T> {
    plan.inverse_planes(&mut g);
    let n = T::of_usize(shape.plane());
    FeatureMap::from_vec(shape, g.iter().map(|z| z.re * n).collect()).expect("sized")
}

fn check_plan<T: Scalar>(plan: &Fft2<T>, shape: Shape4) -> Result<()> {
    if plan.height() != shape.height || plan.width() != shape.width {
        return Err(NiffError::shape(format!(
            "plan is {}x{}, feature map is {}x{}",
            plan.height(),
            plan.width(),
            shape.height,
            shape.width
        )));
    }
    Ok(())
}

fn check_bank<T: Scalar>(bank: &SpectralFilterBank<T>, shape: Shape4, channels: usize) -> Result<()> {
    if bank.channels() != channels {
        return Err(NiffError::shape(format!(
            "bank has {} channels, expected {channels}",
            bank.channels()
        )));
    }
    if bank.height() != shape.height || bank.width() != shape.width {
        return Err(NiffError::shape(format!(
            "bank is {}x{}, feature map is {}x{}",
            bank.height(),
            bank.width(),
            shape.height,
            shape.width
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Depthwise

pub fn depthwise_forward<T: Scalar>(
    plan: &Fft2<T>,
    x: &FeatureMap<T>,
    bank: &SpectralFilterBank<T>,
    keep: bool,
) -> Result<(SpectralOutput<T>, Option<SpectralCache<T>>)> {
    let shape = x.shape();
    check_plan(plan, shape)?;
    check_bank(bank, shape, shape.channels)?;
    x.ensure_finite("depthwise input")?;
    let n = shape.plane();
    let m = unshifted_bank(bank);
    let mut spectra = to_complex(x);
    plan.forward_planes(&mut spectra);
    let mut z = spectra.clone();
    for (pi, plane) in z.chunks_mut(n).enumerate() {
        let mc = &m[(pi % shape.channels) * n..][..n];
        for (v, w) in plane.iter_mut().zip(mc) {
            *v = *v * *w;
        }
    }
    plan.inverse_planes(&mut z);
    let cache = keep.then(|| SpectralCache {
        shape,
        spectra,
        filtered: None,
    });
    Ok((real_part(shape, &z), cache))
}

pub fn depthwise_backward<T: Scalar>(
    plan: &Fft2<T>,
    cache: Option<&SpectralCache<T>>,
    bank: &SpectralFilterBank<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, SpectralFilterBank<T>)> {
    let cache = cache.ok_or(NiffError::MissingState("depthwise forward cache"))?;
    let shape = cache.shape;
    if gy.shape() != shape {
        return Err(NiffError::shape("cotangent shape differs from forward output"));
    }
    let (n, c) = (shape.plane(), shape.channels);
    let m = unshifted_bank(bank);
    let gz = spectral_cotangent(plan, gy);
    let mut gs = gz.clone();
    let mut gm = vec![Cx::new(T::zero(), T::zero()); c * n];
    for (pi, plane) in gs.chunks_mut(n).enumerate() {
        let ch = pi % c;
        let mc = &m[ch * n..][..n];
        let xs = &cache.spectra[pi * n..][..n];
        let acc = &mut gm[ch * n..][..n];
        for i in 0..n {
            acc[i] += plane[i] * xs[i].conj();
            plane[i] = plane[i] * mc[i].conj();
        }
    }
    let gx = input_cotangent(plan, shape, gs);
    Ok((gx, shifted_bank_grad(gm, c, shape.height, shape.width)))
}

// ---------------------------------------------------------------------------
// Full: y_q = Re F^-1 sum_p X_p * m_{q,p}; bank channel index q * C_p + p.

pub fn full_forward<T: Scalar>(
    plan: &Fft2<T>,
    x: &FeatureMap<T>,
    bank: &SpectralFilterBank<T>,
    c_out: usize,
    keep: bool,
) -> Result<(SpectralOutput<T>, Option<SpectralCache<T>>)> {
    let shape = x.shape();
    let c_in = shape.channels;
    check_plan(plan, shape)?;
    check_bank(bank, shape, c_in * c_out)?;
    x.ensure_finite("full input")?;
    let n = shape.plane();
    let m = unshifted_bank(bank);
    let mut spectra = to_complex(x);
    plan.forward_planes(&mut spectra);
    let out_shape = shape.with_channels(c_out);
    let mut z = vec![Cx::new(T::zero(), T::zero()); out_shape.len()];
    for b in 0..shape.batch {
        for q in 0..c_out {
            let dst = &mut z[(b * c_out + q) * n..][..n];
            for p in 0..c_in {
                let xs = &spectra[(b * c_in + p) * n..][..n];
                let mk = &m[(q * c_in + p) * n..][..n];
                for i in 0..n {
                    dst[i] += xs[i] * mk[i];
                }
            }
        }
    }
    plan.inverse_planes(&mut z);
    let cache = keep.then(|| SpectralCache {
        shape,
        spectra,
        filtered: None,
    });
    Ok((real_part(out_shape, &z), cache))
}

pub fn full_backward<T: Scalar>(
    plan: &Fft2<T>,
    cache: Option<&SpectralCache<T>>,
    bank: &SpectralFilterBank<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, SpectralFilterBank<T>)> {
    let cache = cache.ok_or(NiffError::MissingState("full forward cache"))?;
    let shape = cache.shape;
    let (n, c_in, c_out) = (shape.plane(), shape.channels, gy.shape().channels);
    if gy.shape() != shape.with_channels(c_out) || bank.channels() != c_in * c_out {
        return Err(NiffError::shape("cotangent shape differs from forward output"));
    }
    let m = unshifted_bank(bank);
    let gz = spectral_cotangent(plan, gy);
    let mut gs = vec![Cx::new(T::zero(), T::zero()); shape.len()];
    let mut gm = vec![Cx::new(T::zero(), T::zero()); c_in * c_out * n];
    for b in 0..shape.batch {
        for q in 0..c_out {
            let g = &gz[(b * c_out + q) * n..][..n];
            for p in 0..c_in {
                let xs = &cache.spectra[(b * c_in + p) * n..][..n];
                let k = (q * c_in + p) * n;
                let mk = &m[k..k + n];
                let acc = &mut gm[k..k + n];
                for i in 0..n {
                    acc[i] += g[i] * xs[i].conj();
                }
                let dst = &mut gs[(b * c_in + p) * n..][..n];
                for i in 0..n {
                    dst[i] += g[i] * mk[i].conj();
                }
            }
        }
    }
    let gx = input_cotangent(plan, shape, gs);
    Ok((gx, shifted_bank_grad(gm, c_in * c_out, shape.height, shape.width)))
}

// ---------------------------------------------------------------------------
// Decomposed: depthwise multiply, channel mix on complex planes, one inverse.

pub fn decomposed_forward<T: Scalar>(
    plan: &Fft2<T>,
    x: &FeatureMap<T>,
    bank: &SpectralFilterBank<T>,
    mix: &ChannelMix<T>,
    keep: bool,
) -> Result<(SpectralOutput<T>, Option<SpectralCache<T>>)> {
    let shape = x.shape();
    let c_in = shape.channels;
    check_plan(plan, shape)?;
    check_bank(bank, shape, c_in)?;
    if mix.c_in() != c_in {
        return Err(NiffError::shape(format!(
            "mix expects {} input channels, got {c_in}",
            mix.c_in()
        )));
    }
    x.ensure_finite("decomposed input")?;
    let n = shape.plane();
    let c_out = mix.c_out();
    let m = unshifted_bank(bank);
    let mut spectra = to_complex(x);
    plan.forward_planes(&mut spectra);
    let mut filtered = spectra.clone();
    for (pi, plane) in filtered.chunks_mut(n).enumerate() {
        let mc = &m[(pi % c_in) * n..][..n];
        for (v, w) in plane.iter_mut().zip(mc) {
            *v = *v * *w;
        }
    }
    let mut z = mix_planes(&filtered, shape, mix);
    plan.inverse_planes(&mut z);
    let out_shape = shape.with_channels(c_out);
    let mut out = real_part(out_shape, &z);
    add_bias(&mut out.output, mix);
    let cache = keep.then(|| SpectralCache {
        shape,
        spectra,
        filtered: Some(filtered),
    });
    Ok((out, cache))
}

pub fn decomposed_backward<T: Scalar>(
    plan: &Fft2<T>,
    cache: Option<&SpectralCache<T>>,
    bank: &SpectralFilterBank<T>,
    mix: &ChannelMix<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, SpectralFilterBank<T>, MixGrads<T>)> {
    let cache = cache.ok_or(NiffError::MissingState("decomposed forward cache"))?;
    let filtered = cache
        .filtered
        .as_ref()
        .ok_or(NiffError::MissingState("decomposed filtered spectra"))?;
    let shape = cache.shape;
    let (n, c_in) = (shape.plane(), shape.channels);
    if gy.shape() != shape.with_channels(mix.c_out()) {
        return Err(NiffError::shape("cotangent shape differs from forward output"));
    }
    let m = unshifted_bank(bank);
    let gz = spectral_cotangent(plan, gy);
    let mix_grads = mix_grads(&gz, filtered, shape, mix, gy);
    let mut gd = mix_planes_transposed(&gz, shape, mix);
    let mut gm = vec![Cx::new(T::zero(), T::zero()); c_in * n];
    for (pi, plane) in gd.chunks_mut(n).enumerate() {
        let ch = pi % c_in;
        let mc = &m[ch * n..][..n];
        let xs = &cache.spectra[pi * n..][..n];
        let acc = &mut gm[ch * n..][..n];
        for i in 0..n {
            acc[i] += plane[i] * xs[i].conj();
            plane[i] = plane[i] * mc[i].conj();
        }
    }
    let gx = input_cotangent(plan, shape, gd);
    Ok((
        gx,
        shifted_bank_grad(gm, c_in, shape.height, shape.width),
        mix_grads,
    ))
}

// ---------------------------------------------------------------------------
// Pointwise: the channel mix applied to spectra.

pub fn pointwise_forward<T: Scalar>(
    plan: &Fft2<T>,
    x: &FeatureMap<T>,
    mix: &ChannelMix<T>,
    keep: bool,
) -> Result<(SpectralOutput<T>, Option<SpectralCache<T>>)> {
    let shape = x.shape();
    check_plan(plan, shape)?;
    if mix.c_in() != shape.channels {
        return Err(NiffError::shape(format!(
            "mix expects {} input channels, got {}",
            mix.c_in(),
            shape.channels
        )));
    }
    x.ensure_finite("pointwise input")?;
    let mut spectra = to_complex(x);
    plan.forward_planes(&mut spectra);
    let mut z = mix_planes(&spectra, shape, mix);
    plan.inverse_planes(&mut z);
    let mut out = real_part(shape.with_channels(mix.c_out()), &z);
    add_bias(&mut out.output, mix);
    let cache = keep.then(|| SpectralCache {
        shape,
        spectra,
        filtered: None,
    });
    Ok((out, cache))
}

pub fn pointwise_backward<T: Scalar>(
    plan: &Fft2<T>,
    cache: Option<&SpectralCache<T>>,
    mix: &ChannelMix<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, MixGrads<T>)> {
    let cache = cache.ok_or(NiffError::MissingState("pointwise forward cache"))?;
    let shape = cache.shape;
    if gy.shape() != shape.with_channels(mix.c_out()) {
        return Err(NiffError::shape("cotangent shape differs from forward output"));
    }
    let gz = spectral_cotangent(plan, gy);
    let grads = mix_grads(&gz, &cache.spectra, shape, mix, gy);
    let gs = mix_planes_transposed(&gz, shape, mix);
    Ok((input_cotangent(plan, shape, gs), grads))
}

fn mix_planes<T: Scalar>(src: &[Cx<T>], shape: Shape4, mix: &ChannelMix<T>) -> Vec<Cx<T>> {
    let (n, c_in, c_out) = (shape.plane(), shape.channels, mix.c_out());
    let mut out = vec![Cx::new(T::zero(), T::zero()); shape.batch * c_out * n];
    for b in 0..shape.batch {
        for q in 0..c_out {
            let dst = &mut out[(b * c_out + q) * n..][..n];
            for p in 0..c_in {
                let w = mix.w(q, p);
                let s = &src[(b * c_in + p) * n..][..n];
                for i in 0..n {
                    dst[i] += s[i] * w;
                }
            }
        }
    }
    out
}

fn mix_planes_transposed<T: Scalar>(g: &[Cx<T>], shape: Shape4, mix: &ChannelMix<T>) -> Vec<Cx<T>> {
    let (n, c_in, c_out) = (shape.plane(), shape.channels, mix.c_out());
    let mut out = vec![Cx::new(T::zero(), T::zero()); shape.len()];
    for b in 0..shape.batch {
        for p in 0..c_in {
            let dst = &mut out[(b * c_in + p) * n..][..n];
            for q in 0..c_out {
                let w = mix.w(q, p);
                let s = &g[(b * c_out + q) * n..][..n];
                for i in 0..n {
                    dst[i] += s[i] * w;
                }
            }
        }
    }
    out
}

fn mix_grads<T: Scalar>(
    gz: &[Cx<T>],
    src: &[Cx<T>],
    shape: Shape4,
    mix: &ChannelMix<T>,
    gy: &FeatureMap<T>,
) -> MixGrads<T> {
    let (n, c_in, c_out) = (shape.plane(), shape.channels, mix.c_out());
    let mut gw = vec![T::zero(); c_out * c_in];
    for b in 0..shape.batch {
        for q in 0..c_out {
            let g = &gz[(b * c_out + q) * n..][..n];
            for p in 0..c_in {
                let s = &src[(b * c_in + p) * n..][..n];
                let mut acc = T::zero();
                for i in 0..n {
                    acc += g[i].re * s[i].re + g[i].im * s[i].im;
                }
                gw[q * c_in + p] += acc;
            }
        }
    }
    let bias = mix.bias.as_ref().map(|_| channel_sums(gy));
    MixGrads { weight: gw, bias }
}

fn add_bias<T: Scalar>(y: &mut FeatureMap<T>, mix: &ChannelMix<T>) {
    if let Some(bias) = &mix.bias {
        let shape = y.shape();
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                let v = bias.value[c];
                y.plane_mut(b, c).iter_mut().for_each(|o| *o += v);
            }
        }
    }
}

pub(crate) fn channel_sums<T: Scalar>(g: &FeatureMap<T>) -> Vec<T> {
    let shape = g.shape();
    let mut out = vec![T::zero(); shape.channels];
    for b in 0..shape.batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += g.plane(b, c).iter().copied().sum::<T>();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Spatial cross-correlation, zero padding M/2.

/// Output side for stride `s` with padding `M/2` and odd `M`.
pub fn strided_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

pub fn spatial_forward<T: Scalar>(
    x: &FeatureMap<T>,
    k: &SpatialKernel<T>,
    stride: usize,
) -> Result<FeatureMap<T>> {
    let shape = x.shape();
    let m = k.size();
    if m % 2 == 0 {
        return Err(NiffError::invalid(format!("kernel size must be odd, got {m}")));
    }
    let c_out = k.c_out();
    if k.depthwise && c_out != shape.channels {
        return Err(NiffError::shape("depthwise kernel channel count differs from input"));
    }
    if !k.depthwise && k.c_in_per_group() != shape.channels {
        return Err(NiffError::shape(format!(
            "kernel expects {} input channels, got {}",
            k.c_in_per_group(),
            shape.channels
        )));
    }
    let (h, w) = (shape.height, shape.width);
    let (ho, wo) = (strided_len(h, stride), strided_len(w, stride));
    let pad = (m / 2) as isize;
    let out_shape = Shape4::new(shape.batch, c_out, ho, wo);
    let mut out = FeatureMap::zeros(out_shape);
    if !k.depthwise {
        return Ok(im2col_forward(x, k, stride));
    }
    if stride == 1 {
        depthwise_padded(x, k, &mut out);
        return Ok(out);
    }
    let kw = &k.weight.value;
    let per = k.c_in_per_group();
    let taps_at = |u: usize, v: usize| {
        (
            valid_range(h, ho, stride, u as isize - pad),
            valid_range(w, wo, stride, v as isize - pad),
        )
    };
    for b in 0..shape.batch {
        for o in 0..c_out {
            let dst_start = out.index(b, o, 0, 0);
            for ci in 0..per {
                let c = if k.depthwise { o } else { ci };
                let src = x.plane(b, c);
                let taps = &kw[(o * per + ci) * m * m..][..m * m];
                let dst = &mut out.data_mut()[dst_start..dst_start + ho * wo];
                for u in 0..m {
                    for v in 0..m {
                        let kv = taps[u * m + v];
                        let ((ilo, ihi), (jlo, jhi)) = taps_at(u, v);
                        for i in ilo..ihi {
                            let sy = i * stride + u - pad as usize;
                            let row = &src[sy * w..][..w];
                            let drow = &mut dst[i * wo..][..wo];
                            if stride == 1 {
                                let s0 = jlo + v - pad as usize;
                                for (d, sv) in drow[jlo..jhi].iter_mut().zip(&row[s0..s0 + jhi - jlo]) {
                                    *d += kv * *sv;
                                }
                            } else {
                                for j in jlo..jhi {
                                    drow[j] += kv * row[j * stride + v - pad as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn spatial_backward<T: Scalar>(
    x: &FeatureMap<T>,
    k: &SpatialKernel<T>,
    stride: usize,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, Vec<T>)> {
    let shape = x.shape();
    let m = k.size();
    let (h, w) = (shape.height, shape.width);
    let (ho, wo) = (strided_len(h, stride), strided_len(w, stride));
    let c_out = k.c_out();
    if gy.shape() != Shape4::new(shape.batch, c_out, ho, wo) {
        return Err(NiffError::shape("cotangent shape differs from forward output"));
    }
    let pad = (m / 2) as isize;
    let per = k.c_in_per_group();
    let kw = &k.weight.value;
    if !k.depthwise {
        return Ok(im2col_backward(x, k, stride, gy));
    }
    let mut gx = FeatureMap::zeros(shape);
    let mut gk = vec![T::zero(); kw.len()];
    for b in 0..shape.batch {
        for o in 0..c_out {
            let g = gy.plane(b, o);
            for ci in 0..per {
                let c = if k.depthwise { o } else { ci };
                let src = x.plane(b, c);
                let base = (o * per + ci) * m * m;
                let gx_start = gx.index(b, c, 0, 0);
                let gxp = &mut gx.data_mut()[gx_start..gx_start + h * w];
                for u in 0..m {
                    let (ilo, ihi) = valid_range(h, ho, stride, u as isize - pad);
                    for v in 0..m {
                        let (jlo, jhi) = valid_range(w, wo, stride, v as isize - pad);
                        let kv = kw[base + u * m + v];
                        let mut acc = T::zero();
                        for i in ilo..ihi {
                            let sy = i * stride + u - pad as usize;
                            let grow = &g[i * wo..][..wo];
                            if stride == 1 {
                                let s0 = sy * w + jlo + v - pad as usize;
                                let n = jhi - jlo;
                                for ((gv, sv), gxv) in grow[jlo..jhi]
                                    .iter()
                                    .zip(&src[s0..s0 + n])
                                    .zip(gxp[s0..s0 + n].iter_mut())
                                {
                                    acc += *gv * *sv;
                                    *gxv += *gv * kv;
                                }
                            } else {
                                for j in jlo..jhi {
                                    let sx = sy * w + j * stride + v - pad as usize;
                                    let gv = grow[j];
                                    acc += gv * src[sx];
                                    gxp[sx] += gv * kv;
                                }
                            }
                        }
                        gk[base + u * m + v] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gk))
}

/// Patch matrix of one sample: row `(c, u, v)`, column `(i, j)`.
fn im2col<T: Scalar>(src: &[T], c_in: usize, h: usize, w: usize, m: usize, stride: usize, cols: &mut [T]) {
    let (ho, wo) = (strided_len(h, stride), strided_len(w, stride));
    let pad = (m / 2) as isize;
    let p = ho * wo;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..c_in {
        let plane = &src[c * h * w..][..h * w];
        for u in 0..m {
            let (ilo, ihi) = valid_range(h, ho, stride, u as isize - pad);
            for v in 0..m {
                let (jlo, jhi) = valid_range(w, wo, stride, v as isize - pad);
                let row = &mut cols[((c * m + u) * m + v) * p..][..p];
                for i in ilo..ihi {
                    let sy = i * stride + u - pad as usize;
                    for j in jlo..jhi {
                        row[i * wo + j] = plane[sy * w + j * stride + v - pad as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix cotangent back onto one sample.
fn col2im<T: Scalar>(cols: &[T], c_in: usize, h: usize, w: usize, m: usize, stride: usize, dst: &mut [T]) {
    let (ho, wo) = (strided_len(h, stride), strided_len(w, stride));
    let pad = (m / 2) as isize;
    let p = ho * wo;
    for c in 0..c_in {
        let plane = &mut dst[c * h * w..][..h * w];
        for u in 0..m {
            let (ilo, ihi) = valid_range(h, ho, stride, u as isize - pad);
            for v in 0..m {
                let (jlo, jhi) = valid_range(w, wo, stride, v as isize - pad);
                let row = &cols[((c * m + u) * m + v) * p..][..p];
                for i in ilo..ihi {
                    let sy = i * stride + u - pad as usize;
                    for j in jlo..jhi {
                        plane[sy * w + j * stride + v - pad as usize] += row[i * wo + j];
                    }
                }
            }
        }
    }
}

/// Elements of the padded plane touched per tap pass; keeps the accumulator
/// and the source rows it reads in L1.
const TAP_BLOCK: usize = 4096;

/// Stride-1 depthwise conv on a zero-padded copy of each plane. Every tap is
/// one contiguous multiply-add over a block of padded-width rows; the extra
/// `m - 1` columns per row are computed and dropped. Accumulation order per
/// output element is the same as the row loop in `spatial_forward`.
fn depthwise_padded<T: Scalar>(x: &FeatureMap<T>, k: &SpatialKernel<T>, out: &mut FeatureMap<T>) {
    let s = x.shape();
    let (h, w, m) = (s.height, s.width, k.size());
    let p = m / 2;
    let wp = w + 2 * p;
    // one spare row so the last tap's slice stays in bounds
    let mut padded = vec![T::zero(); (h + 2 * p + 1) * wp];
    let mut acc = vec![T::zero(); h * wp];
    let rows_per_block = (TAP_BLOCK / wp).max(1);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let src = x.plane(b, c);
            for i in 0..h {
                padded[(i + p) * wp + p..][..w].copy_from_slice(&src[i * w..][..w]);
            }
            acc.fill(T::zero());
            let taps = &k.weight.value[c * m * m..][..m * m];
            let mut i0 = 0;
            while i0 < h {
                let rows = rows_per_block.min(h - i0);
                let n = rows * wp;
                let dst = &mut acc[i0 * wp..][..n];
                for u in 0..m {
                    for v in 0..m {
                        let kv = taps[u * m + v];
                        for (d, sv) in dst.iter_mut().zip(&padded[(i0 + u) * wp + v..][..n]) {
                            *d += kv * *sv;
                        }
                    }
                }
                i0 += rows;
            }
            let start = out.index(b, c, 0, 0);
            let dst = &mut out.data_mut()[start..start + h * w];
            for i in 0..h {
                dst[i * w..][..w].copy_from_slice(&acc[i * wp..][..w]);
            }
        }
    }
}

fn direct_patches(m: usize, stride: usize) -> bool {
    m == 1 && stride == 1
}

fn im2col_forward<T: Scalar>(x: &FeatureMap<T>, k: &SpatialKernel<T>, stride: usize) -> FeatureMap<T> {
    let s = x.shape();
    let m = k.size();
    let (ho, wo) = (strided_len(s.height, stride), strided_len(s.width, stride));
    let (p, kk, c_out) = (ho * wo, s.channels * m * m, k.c_out());
    let mut out = FeatureMap::zeros(Shape4::new(s.batch, c_out, ho, wo));
    let mut cols = vec![T::zero(); if direct_patches(m, stride) { 0 } else { kk * p }];
    let n_in = s.channels * s.plane();
    for b in 0..s.batch {
        let src = &x.data()[b * n_in..][..n_in];
        let patches: &[T] = if direct_patches(m, stride) {
            src
        } else {
            im2col(src, s.channels, s.height, s.width, m, stride, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[b * c_out * p..][..c_out * p];
        T::gemm(
            c_out,
            kk,
            p,
            T::one(),
            Mat::rows(&k.weight.value, kk),
            Mat::rows(patches, p),
            T::zero(),
            MatMut::rows(dst, p),
        );
    }
    out
}

fn im2col_backward<T: Scalar>(
    x: &FeatureMap<T>,
    k: &SpatialKernel<T>,
    stride: usize,
    gy: &FeatureMap<T>,
) -> (FeatureMap<T>, Vec<T>) {
    let s = x.shape();
    let m = k.size();
    let (ho, wo) = (strided_len(s.height, stride), strided_len(s.width, stride));
    let (p, kk, c_out) = (ho * wo, s.channels * m * m, k.c_out());
    let direct = direct_patches(m, stride);
    let mut gx = FeatureMap::zeros(s);
    let mut gk = vec![T::zero(); k.weight.len()];
    let mut cols = vec![T::zero(); if direct { 0 } else { kk * p }];
    let mut gcols = vec![T::zero(); if direct { 0 } else { kk * p }];
    let n_in = s.channels * s.plane();
    for b in 0..s.batch {
        let src = &x.data()[b * n_in..][..n_in];
        let g = &gy.data()[b * c_out * p..][..c_out * p];
        let patches: &[T] = if direct {
            src
        } else {
            im2col(src, s.channels, s.height, s.width, m, stride, &mut cols);
            &cols
        };
        // dW += gy * patches^T
        T::gemm(
            c_out,
            p,
            kk,
            T::one(),
            Mat::rows(g, p),
            Mat::transposed(patches, p),
            T::one(),
            MatMut::rows(&mut gk, kk),
        );
        // d(patches) = W^T * gy
        let gdst = &mut gx.data_mut()[b * n_in..][..n_in];
        if direct {
            T::gemm(kk, c_out, p, T::one(), Mat::transposed(&k.weight.value, kk), Mat::rows(g, p), T::zero(), MatMut::rows(gdst, p));
        } else {
            T::gemm(kk, c_out, p, T::one(), Mat::transposed(&k.weight.value, kk), Mat::rows(g, p), T::zero(), MatMut::rows(&mut gcols, p));
            col2im(&gcols, s.channels, s.height, s.width, m, stride, gdst);
        }
    }
    (gx, gk)
}

/// Output indices `j` in `0..n_out` with `0 <= j * stride + off < n_in`.
fn valid_range(n_in: usize, n_out: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { (-off) as usize }.div_ceil(stride);
    let last = n_in as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last as usize / stride + 1).min(n_out) };
    (lo.min(hi), hi)
}

/// Zero-padded stride-2 cross-correlation; output side `ceil(N/2)`.
pub fn spatial_conv_stride2<T: Scalar>(x: &FeatureMap<T>, k: &SpatialKernel<T>) -> Result<FeatureMap<T>> {
    spatial_forward(x, k, 2)
}

pub fn spatial_conv_stride2_backward<T: Scalar>(
    x: &FeatureMap<T>,
    k: &SpatialKernel<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, Vec<T>)> {
    spatial_backward(x, k, 2, gy)
}

// ---------------------------------------------------------------------------
// MLP-level entry points.

fn bank_for<T: Scalar>(mlp: &NiffMlp<T>, shape: Shape4) -> Result<(CoordinateGrid<T>, SpectralFilterBank<T>)> {
    let grid = CoordinateGrid::new(shape.height, shape.width)?;
    let bank = mlp.synthesize(&grid);
    Ok((grid, bank))
}

/// Per-channel circular convolution with kernels synthesized in frequency.
pub fn niff_depthwise<T: Scalar>(x: &FeatureMap<T>, mlp: &NiffMlp<T>) -> Result<FeatureMap<T>> {
    let shape = x.shape();
    if mlp.out_channels() != shape.channels {
        return Err(NiffError::shape(format!(
            "MLP emits {} filters for {} channels",
            mlp.out_channels(),
            shape.channels
        )));
    }
    let (_, bank) = bank_for(mlp, shape)?;
    let plan = Fft2::new(shape.height, shape.width);
    Ok(depthwise_forward(&plan, x, &bank, false)?.0.output)
}

/// Full convolution: every output channel sums filtered input channels in the
/// frequency domain. The MLP must emit `C_in * C_out` filters.
pub fn niff_full<T: Scalar>(x: &FeatureMap<T>, mlp: &NiffMlp<T>) -> Result<FeatureMap<T>> {
    let shape = x.shape();
    let c_out = full_out_channels(mlp, shape.channels)?;
    let (_, bank) = bank_for(mlp, shape)?;
    let plan = Fft2::new(shape.height, shape.width);
    Ok(full_forward(&plan, x, &bank, c_out, false)?.0.output)
}

fn full_out_channels<T: Scalar>(mlp: &NiffMlp<T>, c_in: usize) -> Result<usize> {
    let total = mlp.out_channels();
    if total % c_in != 0 {
        return Err(NiffError::shape(format!(
            "{total} filters cannot be arranged as (C_out, {c_in})"
        )));
    }
    Ok(total / c_in)
}

/// Depthwise frequency filtering followed by a channel mix, one transform pair.
pub fn niff_decomposed<T: Scalar>(
    x: &FeatureMap<T>,
    mlp: &NiffMlp<T>,
    mix: &ChannelMix<T>,
) -> Result<FeatureMap<T>> {
    let shape = x.shape();
    if mlp.out_channels() != shape.channels {
        return Err(NiffError::shape("MLP filter count differs from input channels"));
    }
    let (_, bank) = bank_for(mlp, shape)?;
    let plan = Fft2::new(shape.height, shape.width);
    Ok(decomposed_forward(&plan, x, &bank, mix, false)?.0.output)
}

/// 1x1 convolution applied to spectra.
pub fn freq_pointwise<T: Scalar>(x: &FeatureMap<T>, mix: &ChannelMix<T>) -> Result<FeatureMap<T>> {
    let shape = x.shape();
    let plan = Fft2::new(shape.height, shape.width);
    Ok(pointwise_forward(&plan, x, mix, false)?.0.output)
}

/// Input cotangent and MLP gradients for [`niff_depthwise`].
pub fn niff_depthwise_backward<T: Scalar>(
    x: &FeatureMap<T>,
    mlp: &NiffMlp<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, MlpGrads<T>)> {
    let shape = x.shape();
    let grid = CoordinateGrid::new(shape.height, shape.width)?;
    let (bank, mcache) = mlp.synthesize_cached(&grid);
    let plan = Fft2::new(shape.height, shape.width);
    let (_, cache) = depthwise_forward(&plan, x, &bank, true)?;
    let (gx, gbank) = depthwise_backward(&plan, cache.as_ref(), &bank, gy)?;
    Ok((gx, mlp.backward(&mcache, &gbank)))
}

pub fn niff_full_backward<T: Scalar>(
    x: &FeatureMap<T>,
    mlp: &NiffMlp<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, MlpGrads<T>)> {
    let shape = x.shape();
    let c_out = full_out_channels(mlp, shape.channels)?;
    let grid = CoordinateGrid::new(shape.height, shape.width)?;
    let (bank, mcache) = mlp.synthesize_cached(&grid);
    let plan = Fft2::new(shape.height, shape.width);
    let (_, cache) = full_forward(&plan, x, &bank, c_out, true)?;
    let (gx, gbank) = full_backward(&plan, cache.as_ref(), &bank, gy)?;
    Ok((gx, mlp.backward(&mcache, &gbank)))
}

pub fn niff_decomposed_backward<T: Scalar>(
    x: &FeatureMap<T>,
    mlp: &NiffMlp<T>,
    mix: &ChannelMix<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, MlpGrads<T>, MixGrads<T>)> {
    let shape = x.shape();
    let grid = CoordinateGrid::new(shape.height, shape.width)?;
    let (bank, mcache) = mlp.synthesize_cached(&grid);
    let plan = Fft2::new(shape.height, shape.width);
    let (_, cache) = decomposed_forward(&plan, x, &bank, mix, true)?;
    let (gx, gbank, gmix) = decomposed_backward(&plan, cache.as_ref(), &bank, mix, gy)?;
    Ok((gx, mlp.backward(&mcache, &gbank), gmix))
}

pub fn freq_pointwise_backward<T: Scalar>(
    x: &FeatureMap<T>,
    mix: &ChannelMix<T>,
    gy: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, MixGrads<T>)> {
    let shape = x.shape();
    let plan = Fft2::new(shape.height, shape.width);
    let (_, cache) = pointwise_forward(&plan, x, mix, true)?;
    pointwise_backward(&plan, cache.as_ref(), mix, gy)
}
