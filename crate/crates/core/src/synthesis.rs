//! Filter synthesis: a coordinate MLP evaluated over the center-shifted
//! frequency grid yields one complex multiplication weight per channel and bin.
//!
//! The MLP is applied to all `H * W` grid positions at once, which is the
//! stacked 1x1-convolution view of a per-pixel MLP. Output planes are ordered
//! `[re_0 .. re_{C-1}, im_0 .. im_{C-1}]`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use rand::Rng;

use crate::error::{NiffError, Result};
use crate::param::{Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, SpectrumMap};

/// How grid coordinates are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GridNorm {
    /// `(i - n/2) / (n/2)`, spanning `[-1, 1)` or `[-1, 1]`.
    #[default]
    Normalized,
    /// Raw centered offsets `i - n/2`.
    Index,
}

impl FromStr for GridNorm {
    type Err = NiffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(GridNorm::Normalized),
            "index" => Ok(GridNorm::Index),
            other => Err(NiffError::Config(format!(
                "unknown grid_norm `{other}` (expected normalized|index)"
            ))),
        }
    }
}

impl fmt::Display for GridNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridNorm::Normalized => "normalized",
            GridNorm::Index => "index",
        })
    }
}

/// Frequency coordinates for every bin of a shifted `(H, W)` spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid<T> {
    height: usize,
    width: usize,
    xs: Vec<T>,
    ys: Vec<T>,
}

fn axis_coord(i: usize, n: usize, norm: GridNorm) -> f64 {
    let half = n / 2;
    let offset = i as f64 - half as f64;
    match norm {
        GridNorm::Index => offset,
        GridNorm::Normalized if half == 0 => 0.0,
        GridNorm::Normalized => offset / half as f64,
    }
}

impl<T: Scalar> CoordinateGrid<T> {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        Self::with_norm(height, width, GridNorm::Normalized)
    }

    pub fn with_norm(height: usize, width: usize, norm: GridNorm) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(NiffError::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        let mut xs = Vec::with_capacity(height * width);
        let mut ys = Vec::with_capacity(height * width);
        for y in 0..height {
            let yc = T::of(axis_coord(y, height, norm));
            for x in 0..width {
                xs.push(T::of(axis_coord(x, width, norm)));
                ys.push(yc);
            }
        }
        Ok(CoordinateGrid {
            height,
            width,
            xs,
            ys,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn xs(&self) -> &[T] {
        &self.xs
    }

    pub fn ys(&self) -> &[T] {
        &self.ys
    }
}

/// Convenience wrapper matching the grid constructor with default scaling.
pub fn make_grid<T: Scalar>(h: usize, w: usize) -> Result<CoordinateGrid<T>> {
    CoordinateGrid::new(h, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Silu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Gelu => {
                let half = T::of(0.5);
                half * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
            }
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let half = T::of(0.5);
                let cdf = half * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
                let pdf = (-(x * x) * half).exp() / (T::TAU()).sqrt();
                cdf + x * pdf
            }
        }
    }
}

impl FromStr for Activation {
    type Err = NiffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(NiffError::Config(format!(
                "unknown activation `{other}` (expected relu|silu|gelu)"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
        })
    }
}

/// Layer-width presets for the implicit MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// 2 -> 32 -> 2C
    #[default]
    CifarSmall,
    /// 2 -> 8 -> 4 -> 2C
    ImagenetLight,
    /// 2 -> 16 -> 128 -> 32 -> 2C
    ImagenetLarge,
}

impl Preset {
    pub const ALL: [Preset; 3] = [
        Preset::CifarSmall,
        Preset::ImagenetLight,
        Preset::ImagenetLarge,
    ];

    pub fn hidden(self) -> &'static [usize] {
        match self {
            Preset::CifarSmall => &[32],
            Preset::ImagenetLight => &[8, 4],
            Preset::ImagenetLarge => &[16, 128, 32],
        }
    }

    /// Full width chain from the 2 coordinate inputs to `2 * c_out` outputs.
    pub fn widths(self, c_out: usize) -> Vec<usize> {
        let mut w = vec![2];
        w.extend_from_slice(self.hidden());
        w.push(2 * c_out);
        w
    }

    /// Learnable parameter count of the MLP for `c_out` complex filters.
    pub fn param_count(self, c_out: usize) -> usize {
        self.widths(c_out).windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

impl FromStr for Preset {
    type Err = NiffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar_small" => Ok(Preset::CifarSmall),
            "imagenet_light" => Ok(Preset::ImagenetLight),
            "imagenet_large" => Ok(Preset::ImagenetLarge),
            other => Err(NiffError::Config(format!(
                "unknown preset `{other}` (expected cifar_small|imagenet_light|imagenet_large)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::CifarSmall => "cifar_small",
            Preset::ImagenetLight => "imagenet_light",
            Preset::ImagenetLarge => "imagenet_large",
        })
    }
}

/// Fully connected layer, weight stored `out x in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Param::zeros(vec![outputs, inputs]),
            bias: Param::zeros(vec![outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }
}

/// The implicit function mapping a coordinate pair to `2 * C` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct NiffMlp<T> {
    layers: Vec<Dense<T>>,
    activation: Activation,
    out_channels: usize,
}

/// Forward intermediates for [`NiffMlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input to each layer, `(width, positions)` row-major.
    inputs: Vec<Vec<T>>,
    /// Pre-activation output of every hidden layer.
    pre: Vec<Vec<T>>,
    positions: usize,
}

/// Gradients for every layer of a [`NiffMlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> NiffMlp<T> {
    /// All-zero MLP with the given width chain `[2, h1, .., 2C]`.
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths[0] != 2 {
            return Err(NiffError::invalid("width chain must start at 2"));
        }
        let last = *widths.last().expect("non-empty");
        if last == 0 || last % 2 != 0 {
            return Err(NiffError::invalid(
                "final width must be a positive even number (2 * channels)",
            ));
        }
        let layers = widths
            .windows(2)
            .map(|p| Dense::zeros(p[0], p[1]))
            .collect();
        Ok(NiffMlp {
            layers,
            activation,
            out_channels: last / 2,
        })
    }

    pub fn from_layers(layers: Vec<Dense<T>>, activation: Activation) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(NiffError::invalid("MLP needs at least one layer"));
        };
        if first.inputs() != 2 {
            return Err(NiffError::invalid("first layer must take 2 inputs"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NiffError::shape("consecutive MLP layer widths differ"));
            }
        }
        let last = layers.last().expect("non-empty").outputs();
        if last == 0 || last % 2 != 0 {
            return Err(NiffError::invalid("final width must be 2 * channels"));
        }
        Ok(NiffMlp {
            layers,
            activation,
            out_channels: last / 2,
        })
    }

    /// Kaiming-uniform (fan-in) weights and zero biases; the final layer is
    /// additionally scaled by `1 / sqrt(height * width)`.
    pub fn init(
        widths: &[usize],
        activation: Activation,
        height: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(widths, activation)?;
        let last = mlp.layers.len() - 1;
        let res_scale = 1.0 / ((height * width).max(1) as f64).sqrt();
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let bound = (6.0 / layer.inputs() as f64).sqrt();
            let scale = if i == last { res_scale } else { 1.0 };
            for w in layer.weight.value.iter_mut() {
                *w = T::of(rng.gen_range(-bound..bound) * scale);
            }
        }
        Ok(mlp)
    }

    pub fn preset(
        preset: Preset,
        c_out: usize,
        activation: Activation,
        height: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_out == 0 {
            return Err(NiffError::invalid("c_out must be at least 1"));
        }
        Self::init(&preset.widths(c_out), activation, height, width, rng)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![2];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.value.iter().all(|v| v.is_finite())
                && l.bias.value.iter().all(|v| v.is_finite())
        })
    }

    /// Evaluates the MLP at one coordinate pair.
    pub fn eval_point(&self, x: T, y: T) -> Vec<T> {
        let mut act = vec![x, y];
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (layer.inputs(), layer.outputs());
            let w = &layer.weight.value;
            let mut out = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let mut acc = layer.bias.value[o];
                for i in 0..n_in {
                    acc += w[o * n_in + i] * act[i];
                }
                out.push(if li == last {
                    acc
                } else {
                    self.activation.apply(acc)
                });
            }
            act = out;
        }
        act
    }

    fn forward_impl(&self, grid: &CoordinateGrid<T>, keep: bool) -> (Vec<T>, Option<MlpCache<T>>) {
        let p = grid.len();
        let mut act = Vec::with_capacity(2 * p);
        act.extend_from_slice(grid.xs());
        act.extend_from_slice(grid.ys());
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (layer.inputs(), layer.outputs());
            let w = &layer.weight.value;
            let mut out = vec![T::zero(); n_out * p];
            for o in 0..n_out {
                let row = &mut out[o * p..(o + 1) * p];
                row.iter_mut().for_each(|v| *v = layer.bias.value[o]);
                for i in 0..n_in {
                    let wi = w[o * n_in + i];
                    let src = &act[i * p..(i + 1) * p];
                    for (r, s) in row.iter_mut().zip(src) {
                        *r += wi * *s;
                    }
                }
            }
            if li != last {
                let activated: Vec<T> = out.iter().map(|&v| self.activation.apply(v)).collect();
                if keep {
                    pre.push(out);
                }
                out = activated;
            }
            if keep {
                inputs.push(std::mem::replace(&mut act, out));
            } else {
                act = out;
            }
        }
        let cache = keep.then_some(MlpCache {
            inputs,
            pre,
            positions: p,
        });
        (act, cache)
    }

    /// Materializes the filter bank on `grid`.
    pub fn synthesize(&self, grid: &CoordinateGrid<T>) -> SpectralFilterBank<T> {
        let (out, _) = self.forward_impl(grid, false);
        SpectralFilterBank::from_packed(self.out_channels, grid.height(), grid.width(), out)
    }

    /// As [`synthesize`](Self::synthesize), also returning what the backward
    /// pass needs.
    pub fn synthesize_cached(
        &self,
        grid: &CoordinateGrid<T>,
    ) -> (SpectralFilterBank<T>, MlpCache<T>) {
        let (out, cache) = self.forward_impl(grid, true);
        (
            SpectralFilterBank::from_packed(self.out_channels, grid.height(), grid.width(), out),
            cache.expect("cache requested"),
        )
    }

    /// Parameter gradients given a bank-shaped cotangent.
    pub fn backward(&self, cache: &MlpCache<T>, upstream: &SpectralFilterBank<T>) -> MlpGrads<T> {
        let p = cache.positions;
        assert_eq!(upstream.plane_len(), p, "cotangent resolution mismatch");
        assert_eq!(upstream.channels(), self.out_channels);
        let mut g = Vec::with_capacity(2 * self.out_channels * p);
        g.extend_from_slice(upstream.re());
        g.extend_from_slice(upstream.im());

        let n = self.layers.len();
        let mut weights = vec![Vec::new(); n];
        let mut biases = vec![Vec::new(); n];
        for li in (0..n).rev() {
            let layer = &self.layers[li];
            let (n_in, n_out) = (layer.inputs(), layer.outputs());
            let input = &cache.inputs[li];
            let mut gw = vec![T::zero(); n_out * n_in];
            let mut gb = vec![T::zero(); n_out];
            for o in 0..n_out {
                let go = &g[o * p..(o + 1) * p];
                gb[o] = go.iter().copied().sum();
                for i in 0..n_in {
                    let a = &input[i * p..(i + 1) * p];
                    gw[o * n_in + i] = go.iter().zip(a).map(|(x, y)| *x * *y).sum();
                }
            }
            weights[li] = gw;
            biases[li] = gb;
            if li > 0 {
                let w = &layer.weight.value;
                let mut g_in = vec![T::zero(); n_in * p];
                for o in 0..n_out {
                    let go = &g[o * p..(o + 1) * p];
                    for i in 0..n_in {
                        let wi = w[o * n_in + i];
                        let dst = &mut g_in[i * p..(i + 1) * p];
                        for (d, s) in dst.iter_mut().zip(go) {
                            *d += wi * *s;
                        }
                    }
                }
                let pre = &cache.pre[li - 1];
                for (d, z) in g_in.iter_mut().zip(pre) {
                    *d *= self.activation.derivative(*z);
                }
                g = g_in;
            }
        }
        MlpGrads { weights, biases }
    }

    pub fn accumulate(&mut self, grads: &MlpGrads<T>) {
        for ((layer, gw), gb) in self.layers.iter_mut().zip(&grads.weights).zip(&grads.biases) {
            layer.weight.accumulate(gw);
            layer.bias.accumulate(gb);
        }
    }
}

impl<T: Scalar> Parameterized<T> for NiffMlp<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.weight"), &mut layer.weight);
            f(format!("{prefix}.{i}.bias"), &mut layer.bias);
        }
    }
}

/// Evaluates `mlp` on `grid` and returns the gradient for a given cotangent;
/// recomputes the forward pass.
pub fn synthesize_backward<T: Scalar>(
    mlp: &NiffMlp<T>,
    grid: &CoordinateGrid<T>,
    upstream: &SpectralFilterBank<T>,
) -> MlpGrads<T> {
    let (_, cache) = mlp.synthesize_cached(grid);
    mlp.backward(&cache, upstream)
}

/// Complex per-channel multiplication weights in center-shifted layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFilterBank<T> {
    channels: usize,
    height: usize,
    width: usize,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Scalar> SpectralFilterBank<T> {
    fn from_packed(channels: usize, height: usize, width: usize, mut packed: Vec<T>) -> Self {
        let n = channels * height * width;
        debug_assert_eq!(packed.len(), 2 * n);
        let im = packed.split_off(n);
        SpectralFilterBank {
            channels,
            height,
            width,
            re: packed,
            im,
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let n = channels * height * width;
        if n == 0 || re.len() != n || im.len() != n {
            return Err(NiffError::shape(format!(
                "bank of {channels}x{height}x{width} needs {n} re/im values"
            )));
        }
        Ok(SpectralFilterBank {
            channels,
            height,
            width,
            re,
            im,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let n = channels * height * width;
        SpectralFilterBank {
            channels,
            height,
            width,
            re: vec![T::zero(); n],
            im: vec![T::zero(); n],
        }
    }

    /// Wraps a shifted `(1, C, H, W)` or `(C, 1, H, W)` spectrum.
    pub fn from_spectrum(s: &SpectrumMap<T>) -> Result<Self> {
        if !s.is_shifted() {
            return Err(NiffError::ShiftState("filter banks are stored shifted"));
        }
        let shape = s.shape();
        Self::new(
            shape.planes(),
            shape.height,
            shape.width,
            s.re(),
            s.im(),
        )
    }

    pub fn to_spectrum(&self) -> SpectrumMap<T> {
        let shape = Shape4::new(1, self.channels, self.height, self.width);
        SpectrumMap::from_parts(shape, &self.re, &self.im, true).expect("consistent bank")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [T] {
        &mut self.im
    }

    pub fn weight(&self, c: usize, i: usize) -> Complex<T> {
        let k = c * self.plane_len() + i;
        Complex::new(self.re[k], self.im[k])
    }

    /// Channel `c` as complex values, in shifted layout.
    pub fn channel(&self, c: usize) -> Vec<Complex<T>> {
        let n = self.plane_len();
        (0..n)
            .map(|i| Complex::new(self.re[c * n + i], self.im[c * n + i]))
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += *b;
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            *a += *b;
        }
    }
}
