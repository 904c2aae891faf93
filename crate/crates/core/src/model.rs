//! Desk-scale CNNs built from spatial or frequency convolution units.
//!
//! A [`ModelSpec`] is a flat description of the network; the spatial baseline
//! and the NIFF variant of an architecture share every layer except the conv
//! kind of stride-1 convolutions. Downsampling stays spatial in both.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::conv::{
    self, spatial_backward, spatial_forward, strided_len, ChannelMix, SpatialKernel,
    SpectralCache,
};
use crate::error::{NiffError, Result};
use crate::param::{Param, Parameterized};
use crate::scalar::Scalar;
use crate::spectral::Fft2;
use crate::synthesis::{Activation, CoordinateGrid, GridNorm, MlpCache, NiffMlp, Preset, SpectralFilterBank};
use crate::tensor::{FeatureMap, Shape4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Zero-padded stride-1 cross-correlation (depthwise or full).
    Spatial,
    NiffDepthwise,
    NiffFull,
    NiffDecomposed,
    FreqPointwise,
    /// Zero-padded stride-2 cross-correlation, full channel mixing.
    SpatialStride2,
}

impl ConvKind {
    pub fn is_niff(self) -> bool {
        matches!(
            self,
            ConvKind::NiffDepthwise | ConvKind::NiffFull | ConvKind::NiffDecomposed
        )
    }

    pub fn is_spectral(self) -> bool {
        self.is_niff() || self == ConvKind::FreqPointwise
    }
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvKind::Spatial => "spatial",
            ConvKind::NiffDepthwise => "niff_depthwise",
            ConvKind::NiffFull => "niff_full",
            ConvKind::NiffDecomposed => "niff_decomposed",
            ConvKind::FreqPointwise => "freq_pointwise",
            ConvKind::SpatialStride2 => "spatial_stride2",
        })
    }
}

impl FromStr for ConvKind {
    type Err = NiffError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "spatial" => ConvKind::Spatial,
            "niff_depthwise" => ConvKind::NiffDepthwise,
            "niff_full" => ConvKind::NiffFull,
            "niff_decomposed" => ConvKind::NiffDecomposed,
            "freq_pointwise" => ConvKind::FreqPointwise,
            "spatial_stride2" => ConvKind::SpatialStride2,
            other => return Err(NiffError::Config(format!("unknown conv kind `{other}`"))),
        })
    }
}

/// One convolution followed by optional batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial kernel side (spatial kinds only; odd).
    pub kernel: usize,
    /// Spatial kinds: one filter per channel instead of full mixing.
    pub depthwise: bool,
    pub preset: Preset,
    pub mlp_activation: Activation,
    pub grid_norm: GridNorm,
    pub batchnorm: bool,
    pub relu: bool,
}

impl LayerSpec {
    fn new(kind: ConvKind, c_in: usize, c_out: usize, opts: &ArchOptions) -> Self {
        LayerSpec {
            kind,
            in_channels: c_in,
            out_channels: c_out,
            kernel: 1,
            depthwise: false,
            preset: opts.preset,
            mlp_activation: opts.mlp_activation,
            grid_norm: opts.grid_norm,
            batchnorm: true,
            relu: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockSpec {
    Layer(LayerSpec),
    /// Identity skip around the layers, ReLU after the sum.
    Residual(Vec<LayerSpec>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Spatial,
    Niff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStyle {
    /// Depthwise filter then 1x1 channel mix.
    Separable,
    /// Full convolution.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FullImpl {
    Full,
    Decomposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSize {
    Fixed(usize),
    /// Largest odd side not exceeding the feature map.
    FullResolution,
}

impl KernelSize {
    fn resolve(self, h: usize, w: usize) -> usize {
        match self {
            KernelSize::Fixed(m) => m,
            KernelSize::FullResolution => {
                let n = h.min(w);
                if n % 2 == 0 {
                    n - 1
                } else {
                    n
                }
            }
        }
    }
}

/// Choices shared by every stride-1 convolution of an architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchOptions {
    pub variant: Variant,
    pub block: BlockStyle,
    pub full_impl: FullImpl,
    pub preset: Preset,
    pub mlp_activation: Activation,
    pub grid_norm: GridNorm,
    pub kernel: KernelSize,
}

impl Default for ArchOptions {
    fn default() -> Self {
        ArchOptions {
            variant: Variant::Niff,
            block: BlockStyle::Separable,
            full_impl: FullImpl::Decomposed,
            preset: Preset::CifarSmall,
            mlp_activation: Activation::Relu,
            grid_norm: GridNorm::Normalized,
            kernel: KernelSize::Fixed(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
}

/// Stride-1 layers mapping `c_in -> c_out` at resolution `(h, w)`.
fn conv_unit(c_in: usize, c_out: usize, h: usize, w: usize, opts: &ArchOptions) -> Vec<LayerSpec> {
    let m = opts.kernel.resolve(h, w);
    match (opts.block, opts.variant) {
        (BlockStyle::Separable, Variant::Spatial) => vec![
            LayerSpec {
                kernel: m,
                depthwise: true,
                ..LayerSpec::new(ConvKind::Spatial, c_in, c_in, opts)
            },
            LayerSpec::new(ConvKind::Spatial, c_in, c_out, opts),
        ],
        (BlockStyle::Separable, Variant::Niff) => vec![
            LayerSpec::new(ConvKind::NiffDepthwise, c_in, c_in, opts),
            LayerSpec::new(ConvKind::FreqPointwise, c_in, c_out, opts),
        ],
        (BlockStyle::Full, Variant::Spatial) => vec![LayerSpec {
            kernel: m,
            ..LayerSpec::new(ConvKind::Spatial, c_in, c_out, opts)
        }],
        (BlockStyle::Full, Variant::Niff) => {
            let kind = match opts.full_impl {
                FullImpl::Full => ConvKind::NiffFull,
                FullImpl::Decomposed => ConvKind::NiffDecomposed,
            };
            vec![LayerSpec::new(kind, c_in, c_out, opts)]
        }
    }
}

/// Input stem: a full convolution so every stem channel sees its own filter.
fn stem_unit(c_in: usize, c_out: usize, h: usize, w: usize, opts: &ArchOptions) -> Vec<LayerSpec> {
    let full = ArchOptions {
        block: BlockStyle::Full,
        full_impl: FullImpl::Full,
        ..*opts
    };
    conv_unit(c_in, c_out, h, w, &full)
}

fn downsample(c_in: usize, c_out: usize, opts: &ArchOptions) -> LayerSpec {
    LayerSpec {
        kernel: 3,
        ..LayerSpec::new(ConvKind::SpatialStride2, c_in, c_out, opts)
    }
}

impl ModelSpec {
    /// Plain network: a full-convolution stem, then per later stage a stride-1
    /// conv unit, with a stride-2 spatial convolution between stages.
    pub fn plain(input: (usize, usize, usize), channels: &[usize], classes: usize, opts: &ArchOptions) -> Self {
        let (mut c, mut h, mut w) = input;
        let mut blocks = Vec::new();
        for (i, &ci) in channels.iter().enumerate() {
            let unit = if i == 0 { stem_unit(c, ci, h, w, opts) } else { conv_unit(c, ci, h, w, opts) };
            for l in unit {
                blocks.push(BlockSpec::Layer(l));
            }
            c = ci;
            if i + 1 < channels.len() {
                blocks.push(BlockSpec::Layer(downsample(c, c, opts)));
                h = strided_len(h, 2);
                w = strided_len(w, 2);
            }
        }
        ModelSpec {
            input,
            blocks,
            classes,
        }
    }

    /// Residual network: a stem unit, then per stage two residual blocks of two
    /// conv units each; stages after the first open with a stride-2 spatial
    /// convolution.
    pub fn resnet(input: (usize, usize, usize), channels: &[usize], classes: usize, opts: &ArchOptions) -> Self {
        let (c0, mut h, mut w) = input;
        let mut blocks = Vec::new();
        let first = channels.first().copied().unwrap_or(c0);
        for l in stem_unit(c0, first, h, w, opts) {
            blocks.push(BlockSpec::Layer(l));
        }
        let mut c = first;
        for (i, &ci) in channels.iter().enumerate() {
            if i > 0 {
                blocks.push(BlockSpec::Layer(downsample(c, ci, opts)));
                h = strided_len(h, 2);
                w = strided_len(w, 2);
                c = ci;
            }
            for _ in 0..2 {
                let mut body = conv_unit(c, c, h, w, opts);
                body.extend(conv_unit(c, c, h, w, opts));
                body.last_mut().expect("non-empty unit").relu = false;
                blocks.push(BlockSpec::Residual(body));
            }
        }
        ModelSpec {
            input,
            blocks,
            classes,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.blocks.iter().flat_map(|b| match b {
            BlockSpec::Layer(l) => std::slice::from_ref(l).iter(),
            BlockSpec::Residual(ls) => ls.iter(),
        })
    }

    /// Checks the channel chain and the stride rule; returns the final
    /// `(channels, height, width)`.
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.classes == 0 {
            return Err(NiffError::Config("input dims and class count must be positive".into()));
        }
        let step = |l: &LayerSpec, c: &mut usize, h: &mut usize, w: &mut usize| -> Result<()> {
            if l.in_channels != *c {
                return Err(NiffError::Config(format!(
                    "{} layer expects {} channels but receives {}",
                    l.kind, l.in_channels, c
                )));
            }
            match l.kind {
                ConvKind::Spatial | ConvKind::SpatialStride2 => {
                    if l.kernel % 2 == 0 {
                        return Err(NiffError::Config(format!("kernel {} must be odd", l.kernel)));
                    }
                    if l.depthwise && l.in_channels != l.out_channels {
                        return Err(NiffError::Config("depthwise layer cannot change channels".into()));
                    }
                }
                ConvKind::NiffDepthwise if l.in_channels != l.out_channels => {
                    return Err(NiffError::Config("depthwise layer cannot change channels".into()));
                }
                _ => {}
            }
            if l.kind == ConvKind::SpatialStride2 {
                *h = strided_len(*h, 2);
                *w = strided_len(*w, 2);
            }
            *c = l.out_channels;
            Ok(())
        };
        for block in &self.blocks {
            match block {
                BlockSpec::Layer(l) => step(l, &mut c, &mut h, &mut w)?,
                BlockSpec::Residual(ls) => {
                    let (c0, h0, w0) = (c, h, w);
                    for l in ls {
                        if l.kind == ConvKind::SpatialStride2 {
                            return Err(NiffError::Config(
                                "residual bodies cannot downsample".into(),
                            ));
                        }
                        step(l, &mut c, &mut h, &mut w)?;
                    }
                    if (c, h, w) != (c0, h0, w0) {
                        return Err(NiffError::Config("residual body must preserve shape".into()));
                    }
                }
            }
        }
        Ok((c, h, w))
    }

    /// Same topology with every stride-1 spatial unit swapped for its NIFF
    /// counterpart or vice versa is produced by rebuilding from options; this
    /// reports whether the spec contains any NIFF layer.
    pub fn has_niff(&self) -> bool {
        self.layers().any(|l| l.kind.is_niff())
    }
}

// ---------------------------------------------------------------------------
// Runtime layers

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    momentum: T,
    eps: T,
    cache: Option<(FeatureMap<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Param::new(vec![c], vec![T::one(); c]),
            beta: Param::zeros(vec![c]),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            momentum: T::of(0.1),
            eps: T::of(1e-5),
            cache: None,
        }
    }

    fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> FeatureMap<T> {
        let s = x.shape();
        let count = s.batch * s.plane();
        let mut y = x.clone();
        if train {
            let mut xhat = x.clone();
            let mut inv_std = vec![T::zero(); s.channels];
            let n = T::of_usize(count);
            for c in 0..s.channels {
                let mut sum = T::zero();
                for b in 0..s.batch {
                    sum += x.plane(b, c).iter().copied().sum::<T>();
                }
                let mean = sum / n;
                let mut var = T::zero();
                for b in 0..s.batch {
                    var += x.plane(b, c).iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>();
                }
                var /= n;
                let is = T::one() / (var + self.eps).sqrt();
                inv_std[c] = is;
                let unbiased = if count > 1 { var * n / (n - T::one()) } else { var };
                let m = self.momentum;
                self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * mean;
                self.running_var[c] = (T::one() - m) * self.running_var[c] + m * unbiased;
                let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
                for b in 0..s.batch {
                    let xh = xhat.plane_mut(b, c);
                    for v in xh.iter_mut() {
                        *v = (*v - mean) * is;
                    }
                    let yp = y.plane_mut(b, c);
                    for (o, h) in yp.iter_mut().zip(xhat.plane(b, c)) {
                        *o = g * *h + bt;
                    }
                }
            }
            self.cache = Some((xhat, inv_std));
        } else {
            for c in 0..s.channels {
                let is = T::one() / (self.running_var[c] + self.eps).sqrt();
                let scale = self.gamma.value[c] * is;
                let shift = self.beta.value[c] - self.running_mean[c] * scale;
                for b in 0..s.batch {
                    for v in y.plane_mut(b, c) {
                        *v = *v * scale + shift;
                    }
                }
            }
        }
        y
    }

    fn backward(&mut self, gy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (xhat, inv_std) = self
            .cache
            .take()
            .ok_or(NiffError::MissingState("batch norm forward cache"))?;
        let s = gy.shape();
        let n = T::of_usize(s.batch * s.plane());
        let mut gx = FeatureMap::zeros(s);
        for c in 0..s.channels {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..s.batch {
                for (g, h) in gy.plane(b, c).iter().zip(xhat.plane(b, c)) {
                    sum_g += *g;
                    sum_gx += *g * *h;
                }
            }
            self.gamma.grad[c] += sum_gx;
            self.beta.grad[c] += sum_g;
            let k = self.gamma.value[c] * inv_std[c] / n;
            for b in 0..s.batch {
                let dst = gx.plane_mut(b, c);
                for ((o, g), h) in dst.iter_mut().zip(gy.plane(b, c)).zip(xhat.plane(b, c)) {
                    *o = k * (n * *g - sum_g - *h * sum_gx);
                }
            }
        }
        Ok(gx)
    }
}

/// Synthesized-filter state shared by the NIFF layer kinds.
#[derive(Debug, Clone)]
pub struct NiffFilter<T: Scalar> {
    pub mlp: NiffMlp<T>,
    grid: CoordinateGrid<T>,
    /// Bank reused across eval forwards until parameters change.
    bank: Option<SpectralFilterBank<T>>,
    mlp_cache: Option<MlpCache<T>>,
    pub cache_bank: bool,
}

impl<T: Scalar> NiffFilter<T> {
    fn bank(&mut self, train: bool) -> SpectralFilterBank<T> {
        if train {
            let (bank, cache) = self.mlp.synthesize_cached(&self.grid);
            self.mlp_cache = Some(cache);
            self.bank = None;
            return bank;
        }
        if self.cache_bank {
            if let Some(b) = &self.bank {
                return b.clone();
            }
            let b = self.mlp.synthesize(&self.grid);
            self.bank = Some(b.clone());
            b
        } else {
            self.mlp.synthesize(&self.grid)
        }
    }

    /// Bank at the layer's own resolution, always freshly synthesized.
    pub fn current_bank(&self) -> SpectralFilterBank<T> {
        self.mlp.synthesize(&self.grid)
    }

    fn backward(&mut self, gbank: &SpectralFilterBank<T>) -> Result<()> {
        let cache = self
            .mlp_cache
            .take()
            .ok_or(NiffError::MissingState("filter synthesis cache"))?;
        let grads = self.mlp.backward(&cache, gbank);
        self.mlp.accumulate(&grads);
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum ConvOp<T: Scalar> {
    Spatial {
        kernel: SpatialKernel<T>,
        stride: usize,
        input: Option<FeatureMap<T>>,
    },
    Depthwise {
        filter: NiffFilter<T>,
        bank: Option<SpectralFilterBank<T>>,
        cache: Option<SpectralCache<T>>,
    },
    Full {
        filter: NiffFilter<T>,
        c_out: usize,
        bank: Option<SpectralFilterBank<T>>,
        cache: Option<SpectralCache<T>>,
    },
    Decomposed {
        filter: NiffFilter<T>,
        mix: ChannelMix<T>,
        bank: Option<SpectralFilterBank<T>>,
        cache: Option<SpectralCache<T>>,
    },
    Pointwise {
        mix: ChannelMix<T>,
        cache: Option<SpectralCache<T>>,
    },
}

/// A convolution with its normalization and activation.
#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar> {
    pub spec: LayerSpec,
    op: ConvOp<T>,
    plan: Option<Fft2<T>>,
    bn: Option<BatchNorm<T>>,
    relu_mask: Option<Vec<bool>>,
    /// Largest imaginary magnitude discarded by the last spectral forward.
    pub last_imag_residue: T,
    /// Input resolution.
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> ConvLayer<T> {
    fn build(spec: &LayerSpec, h: usize, w: usize, rng: &mut impl Rng) -> Result<Self> {
        let filter = |c: usize, rng: &mut dyn rand::RngCore| -> Result<NiffFilter<T>> {
            let mut rng = rng;
            Ok(NiffFilter {
                mlp: NiffMlp::preset(spec.preset, c, spec.mlp_activation, h, w, &mut rng)?,
                grid: CoordinateGrid::with_norm(h, w, spec.grid_norm)?,
                bank: None,
                mlp_cache: None,
                cache_bank: true,
            })
        };
        let (c_in, c_out) = (spec.in_channels, spec.out_channels);
        let op = match spec.kind {
            ConvKind::Spatial => ConvOp::Spatial {
                kernel: SpatialKernel::init(c_out, c_in, spec.kernel, spec.depthwise, rng),
                stride: 1,
                input: None,
            },
            ConvKind::SpatialStride2 => ConvOp::Spatial {
                kernel: SpatialKernel::init(c_out, c_in, spec.kernel, spec.depthwise, rng),
                stride: 2,
                input: None,
            },
            ConvKind::NiffDepthwise => ConvOp::Depthwise {
                filter: filter(c_in, rng)?,
                bank: None,
                cache: None,
            },
            ConvKind::NiffFull => ConvOp::Full {
                filter: filter(c_in * c_out, rng)?,
                c_out,
                bank: None,
                cache: None,
            },
            ConvKind::NiffDecomposed => ConvOp::Decomposed {
                filter: filter(c_in, rng)?,
                mix: ChannelMix::init(c_out, c_in, false, rng),
                bank: None,
                cache: None,
            },
            ConvKind::FreqPointwise => ConvOp::Pointwise {
                mix: ChannelMix::init(c_out, c_in, false, rng),
                cache: None,
            },
        };
        Ok(ConvLayer {
            spec: spec.clone(),
            op,
            plan: spec.kind.is_spectral().then(|| Fft2::new(h, w)),
            bn: spec.batchnorm.then(|| BatchNorm::new(c_out)),
            relu_mask: None,
            last_imag_residue: T::zero(),
            height: h,
            width: w,
        })
    }

    pub fn filter(&self) -> Option<&NiffFilter<T>> {
        match &self.op {
            ConvOp::Depthwise { filter, .. }
            | ConvOp::Full { filter, .. }
            | ConvOp::Decomposed { filter, .. } => Some(filter),
            _ => None,
        }
    }

    pub fn filter_mut(&mut self) -> Option<&mut NiffFilter<T>> {
        match &mut self.op {
            ConvOp::Depthwise { filter, .. }
            | ConvOp::Full { filter, .. }
            | ConvOp::Decomposed { filter, .. } => Some(filter),
            _ => None,
        }
    }

    pub fn output_shape(&self, batch: usize) -> Shape4 {
        let (h, w) = if self.spec.kind == ConvKind::SpatialStride2 {
            (strided_len(self.height, 2), strided_len(self.width, 2))
        } else {
            (self.height, self.width)
        };
        Shape4::new(batch, self.spec.out_channels, h, w)
    }

    fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<FeatureMap<T>> {
        let plan = self.plan.as_ref();
        let (mut y, residue) = match &mut self.op {
            ConvOp::Spatial { kernel, stride, input } => {
                let y = spatial_forward(x, kernel, *stride)?;
                *input = train.then(|| x.clone());
                (y, T::zero())
            }
            ConvOp::Depthwise { filter, bank, cache } => {
                let b = filter.bank(train);
                let (out, c) = conv::depthwise_forward(plan.expect("plan"), x, &b, train)?;
                *cache = c;
                *bank = train.then_some(b);
                (out.output, out.imag_residue)
            }
            ConvOp::Full {
                filter,
                c_out,
                bank,
                cache,
            } => {
                let b = filter.bank(train);
                let (out, c) = conv::full_forward(plan.expect("plan"), x, &b, *c_out, train)?;
                *cache = c;
                *bank = train.then_some(b);
                (out.output, out.imag_residue)
            }
            ConvOp::Decomposed {
                filter,
                mix,
                bank,
                cache,
            } => {
                let b = filter.bank(train);
                let (out, c) = conv::decomposed_forward(plan.expect("plan"), x, &b, mix, train)?;
                *cache = c;
                *bank = train.then_some(b);
                (out.output, out.imag_residue)
            }
            ConvOp::Pointwise { mix, cache } => {
                let (out, c) = conv::pointwise_forward(plan.expect("plan"), x, mix, train)?;
                *cache = c;
                (out.output, out.imag_residue)
            }
        };
        self.last_imag_residue = residue;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y, train);
        }
        if self.spec.relu {
            let mask: Vec<bool> = y.data().iter().map(|v| *v > T::zero()).collect();
            for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                if !m {
                    *v = T::zero();
                }
            }
            self.relu_mask = train.then_some(mask);
        }
        Ok(y)
    }

    fn backward(&mut self, gy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = gy.clone();
        if self.spec.relu {
            let mask = self
                .relu_mask
                .take()
                .ok_or(NiffError::MissingState("relu mask"))?;
            for (v, m) in g.data_mut().iter_mut().zip(&mask) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g)?;
        }
        let plan = self.plan.as_ref();
        match &mut self.op {
            ConvOp::Spatial { kernel, stride, input } => {
                let x = input.take().ok_or(NiffError::MissingState("spatial input"))?;
                let (gx, gk) = spatial_backward(&x, kernel, *stride, &g)?;
                kernel.weight.accumulate(&gk);
                Ok(gx)
            }
            ConvOp::Depthwise { filter, bank, cache } => {
                let b = bank.take().ok_or(NiffError::MissingState("depthwise bank"))?;
                let (gx, gb) = conv::depthwise_backward(plan.expect("plan"), cache.take().as_ref(), &b, &g)?;
                filter.backward(&gb)?;
                Ok(gx)
            }
            ConvOp::Full {
                filter, bank, cache, ..
            } => {
                let b = bank.take().ok_or(NiffError::MissingState("full bank"))?;
                let (gx, gb) = conv::full_backward(plan.expect("plan"), cache.take().as_ref(), &b, &g)?;
                filter.backward(&gb)?;
                Ok(gx)
            }
            ConvOp::Decomposed {
                filter,
                mix,
                bank,
                cache,
            } => {
                let b = bank.take().ok_or(NiffError::MissingState("decomposed bank"))?;
                let (gx, gb, gm) =
                    conv::decomposed_backward(plan.expect("plan"), cache.take().as_ref(), &b, mix, &g)?;
                filter.backward(&gb)?;
                mix.weight.accumulate(&gm.weight);
                Ok(gx)
            }
            ConvOp::Pointwise { mix, cache } => {
                let (gx, gm) = conv::pointwise_backward(plan.expect("plan"), cache.take().as_ref(), mix, &g)?;
                mix.weight.accumulate(&gm.weight);
                Ok(gx)
            }
        }
    }

    fn invalidate(&mut self) {
        if let Some(f) = self.filter_mut() {
            f.bank = None;
        }
    }
}

impl<T: Scalar> Parameterized<T> for ConvLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        match &mut self.op {
            ConvOp::Spatial { kernel, .. } => f(format!("{prefix}.kernel"), &mut kernel.weight),
            ConvOp::Depthwise { filter, .. } | ConvOp::Full { filter, .. } => {
                filter.mlp.visit_params(&format!("{prefix}.mlp"), f)
            }
            ConvOp::Decomposed { filter, mix, .. } => {
                filter.mlp.visit_params(&format!("{prefix}.mlp"), f);
                f(format!("{prefix}.mix"), &mut mix.weight);
            }
            ConvOp::Pointwise { mix, .. } => f(format!("{prefix}.mix"), &mut mix.weight),
        }
        if let Some(bn) = &mut self.bn {
            f(format!("{prefix}.bn.gamma"), &mut bn.gamma);
            f(format!("{prefix}.bn.beta"), &mut bn.beta);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        if let Some(bn) = &mut self.bn {
            f(format!("{prefix}.bn.running_mean"), &mut bn.running_mean);
            f(format!("{prefix}.bn.running_var"), &mut bn.running_var);
        }
    }
}

#[derive(Debug, Clone)]
enum Block<T: Scalar> {
    Layer(ConvLayer<T>),
    Residual {
        layers: Vec<ConvLayer<T>>,
        mask: Option<Vec<bool>>,
    },
}

/// Global average pool followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct Head<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pooled: Option<(Vec<T>, Shape4)>,
}

impl<T: Scalar> Head<T> {
    fn new(c: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (c as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
        };
        Head {
            weight: Param::new(vec![classes, c], draw(classes * c)),
            bias: Param::new(vec![classes], draw(classes)),
            pooled: None,
        }
    }

    fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Vec<T> {
        let s = x.shape();
        let classes = self.bias.len();
        let inv = T::one() / T::of_usize(s.plane());
        let mut pooled = vec![T::zero(); s.batch * s.channels];
        for b in 0..s.batch {
            for c in 0..s.channels {
                pooled[b * s.channels + c] = x.plane(b, c).iter().copied().sum::<T>() * inv;
            }
        }
        let mut logits = vec![T::zero(); s.batch * classes];
        for b in 0..s.batch {
            for k in 0..classes {
                let mut acc = self.bias.value[k];
                for c in 0..s.channels {
                    acc += self.weight.value[k * s.channels + c] * pooled[b * s.channels + c];
                }
                logits[b * classes + k] = acc;
            }
        }
        self.pooled = train.then_some((pooled, s));
        logits
    }

    fn backward(&mut self, glogits: &[T]) -> Result<FeatureMap<T>> {
        let (pooled, s) = self
            .pooled
            .take()
            .ok_or(NiffError::MissingState("classifier head cache"))?;
        let classes = self.bias.len();
        let c = s.channels;
        let mut gpool = vec![T::zero(); s.batch * c];
        for b in 0..s.batch {
            for k in 0..classes {
                let g = glogits[b * classes + k];
                self.bias.grad[k] += g;
                for ch in 0..c {
                    self.weight.grad[k * c + ch] += g * pooled[b * c + ch];
                    gpool[b * c + ch] += g * self.weight.value[k * c + ch];
                }
            }
        }
        let inv = T::one() / T::of_usize(s.plane());
        let mut gx = FeatureMap::zeros(s);
        for b in 0..s.batch {
            for ch in 0..c {
                let v = gpool[b * c + ch] * inv;
                gx.plane_mut(b, ch).iter_mut().for_each(|o| *o = v);
            }
        }
        Ok(gx)
    }
}

/// A NIFF layer's current filters, for analysis.
#[derive(Debug, Clone)]
pub struct LayerBank<T> {
    pub name: String,
    pub kind: ConvKind,
    pub bank: SpectralFilterBank<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    spec: ModelSpec,
    blocks: Vec<Block<T>>,
    head: Head<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let (c_last, _, _) = spec.validate()?;
        let (_, mut h, mut w) = spec.input;
        let mut blocks = Vec::new();
        for block in &spec.blocks {
            match block {
                BlockSpec::Layer(l) => {
                    let layer = ConvLayer::build(l, h, w, rng)?;
                    let out = layer.output_shape(1);
                    h = out.height;
                    w = out.width;
                    blocks.push(Block::Layer(layer));
                }
                BlockSpec::Residual(ls) => {
                    let layers = ls
                        .iter()
                        .map(|l| ConvLayer::build(l, h, w, rng))
                        .collect::<Result<Vec<_>>>()?;
                    blocks.push(Block::Residual { layers, mask: None });
                }
            }
        }
        Ok(Model {
            spec: spec.clone(),
            blocks,
            head: Head::new(c_last, spec.classes, rng),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Logits, `batch x classes` row-major.
    pub fn forward(&mut self, x: &FeatureMap<T>, train: bool) -> Result<Vec<T>> {
        let (c, h, w) = self.spec.input;
        let s = x.shape();
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(NiffError::shape(format!(
                "model expects {c}x{h}x{w} inputs, got {}x{}x{}",
                s.channels, s.height, s.width
            )));
        }
        let mut act = x.clone();
        for block in &mut self.blocks {
            act = match block {
                Block::Layer(l) => l.forward(&act, train)?,
                Block::Residual { layers, mask } => {
                    let mut y = act.clone();
                    for l in layers.iter_mut() {
                        y = l.forward(&y, train)?;
                    }
                    let mut m = Vec::with_capacity(y.data().len());
                    for (o, skip) in y.data_mut().iter_mut().zip(act.data()) {
                        let v = *o + *skip;
                        m.push(v > T::zero());
                        *o = v.max(T::zero());
                    }
                    *mask = train.then_some(m);
                    y
                }
            };
        }
        Ok(self.head.forward(&act, train))
    }

    /// Back-propagates logit cotangents, accumulating into every gradient.
    pub fn backward(&mut self, glogits: &[T]) -> Result<()> {
        let mut g = self.head.backward(glogits)?;
        for block in self.blocks.iter_mut().rev() {
            g = match block {
                Block::Layer(l) => l.backward(&g)?,
                Block::Residual { layers, mask } => {
                    let m = mask.take().ok_or(NiffError::MissingState("residual mask"))?;
                    for (v, keep) in g.data_mut().iter_mut().zip(&m) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                    let mut inner = g.clone();
                    for l in layers.iter_mut().rev() {
                        inner = l.backward(&inner)?;
                    }
                    for (a, b) in inner.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                    inner
                }
            };
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    /// Drops cached filter banks; call after changing parameters.
    pub fn invalidate(&mut self) {
        for l in self.conv_layers_mut() {
            l.invalidate();
        }
    }

    pub fn set_bank_caching(&mut self, on: bool) {
        for l in self.conv_layers_mut() {
            if let Some(f) = l.filter_mut() {
                f.cache_bank = on;
                f.bank = None;
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Layer(l) => out.push(l),
                Block::Residual { layers, .. } => out.extend(layers.iter()),
            }
        }
        out
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            match b {
                Block::Layer(l) => out.push(l),
                Block::Residual { layers, .. } => out.extend(layers.iter_mut()),
            }
        }
        out
    }

    /// Current filter bank of every NIFF layer, named by layer index.
    pub fn niff_banks(&self) -> Vec<LayerBank<T>> {
        self.conv_layers()
            .into_iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.filter().map(|f| LayerBank {
                    name: format!("layer{i}"),
                    kind: l.spec.kind,
                    bank: f.current_bank(),
                })
            })
            .collect()
    }

    /// Largest discarded imaginary residue per spectral layer from the last
    /// forward pass.
    pub fn imag_residues(&self) -> Vec<(usize, T)> {
        self.conv_layers()
            .into_iter()
            .enumerate()
            .filter(|(_, l)| l.spec.kind.is_spectral())
            .map(|(i, l)| (i, l.last_imag_residue))
            .collect()
    }
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn visit_params(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, l) in self.conv_layers_mut().into_iter().enumerate() {
            l.visit_params(&format!("layer{i}"), f);
        }
        f("head.weight".into(), &mut self.head.weight);
        f("head.bias".into(), &mut self.head.bias);
    }

    fn visit_buffers(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        for (i, l) in self.conv_layers_mut().into_iter().enumerate() {
            l.visit_buffers(&format!("layer{i}"), f);
        }
    }
}
