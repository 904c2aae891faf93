//! Reference implementations used only by tests. None of these touch the
//! library's FFT or convolution code paths.
#![allow(dead_code)]

use niff::conv::{ChannelMix, SpatialKernel};
use niff::synthesis::{Activation, NiffMlp, Preset, SpectralFilterBank};
use niff::{FeatureMap, Shape4};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type C64 = Complex<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(shape: Shape4, rng: &mut impl Rng) -> FeatureMap<f64> {
    FeatureMap::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_bank(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> SpectralFilterBank<f64> {
    let n = c * h * w;
    SpectralFilterBank::new(
        c,
        h,
        w,
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_mix(c_out: usize, c_in: usize, bias: bool, rng: &mut impl Rng) -> ChannelMix<f64> {
    ChannelMix::new(
        c_out,
        c_in,
        (0..c_out * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        bias.then(|| (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    )
    .unwrap()
}

/// MLP with all parameters drawn from U(-1, 1), final layer scaled down.
pub fn random_mlp(preset: Preset, c: usize, act: Activation, rng: &mut impl Rng) -> NiffMlp<f64> {
    let mut mlp = NiffMlp::zeros(&preset.widths(c), act).unwrap();
    let n = mlp.layers().len();
    for (i, layer) in mlp.layers_mut().iter_mut().enumerate() {
        let s = if i + 1 == n { 0.3 } else { 1.0 };
        for v in layer.weight.value.iter_mut().chain(layer.bias.value.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0) * s;
        }
    }
    mlp
}

/// O(N^4) inverse DFT with 1/(HW) scaling.
pub fn naive_idft(plane: &[C64], h: usize, w: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = C64::new(0.0, 0.0);
            for u in 0..h {
                for v in 0..w {
                    let phase = 2.0
                        * std::f64::consts::PI
                        * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += plane[u * w + v] * C64::from_polar(1.0, phase);
                }
            }
            out[y * w + x] = acc / (h * w) as f64;
        }
    }
    out
}

/// O(N^4) forward DFT, unscaled.
pub fn naive_dft(plane: &[C64], h: usize, w: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = C64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += plane[y * w + x] * C64::from_polar(1.0, phase);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

/// Undo the center shift by explicit index arithmetic: shifted index
/// `(u + h/2) % h` holds frequency `u`.
pub fn unshift_by_index(shifted: &[C64], h: usize, w: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            out[u * w + v] = shifted[((u + h / 2) % h) * w + (v + w / 2) % w];
        }
    }
    out
}

/// Spatial kernel `real(ifft2(unshift(m_c)))` of bank channel `c`, computed
/// with the naive inverse DFT.
pub fn kernel_of(bank: &SpectralFilterBank<f64>, c: usize) -> Vec<f64> {
    let (h, w) = (bank.height(), bank.width());
    let m = unshift_by_index(&bank.channel(c), h, w);
    naive_idft(&m, h, w).iter().map(|z| z.re).collect()
}

/// Circular convolution `y[n] = sum_m x[m] k[n - m]`.
pub fn circconv(x: &[f64], k: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for my in 0..h {
                for mx in 0..w {
                    let ky = (y + h - my) % h;
                    let kx = (xx + w - mx) % w;
                    acc += x[my * w + mx] * k[ky * w + kx];
                }
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

pub fn depthwise_oracle(x: &FeatureMap<f64>, bank: &SpectralFilterBank<f64>) -> FeatureMap<f64> {
    let s = x.shape();
    let kernels: Vec<Vec<f64>> = (0..s.channels).map(|c| kernel_of(bank, c)).collect();
    let mut out = FeatureMap::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let y = circconv(x.plane(b, c), &kernels[c], s.height, s.width);
            out.plane_mut(b, c).copy_from_slice(&y);
        }
    }
    out
}

pub fn full_oracle(x: &FeatureMap<f64>, bank: &SpectralFilterBank<f64>, c_out: usize) -> FeatureMap<f64> {
    let s = x.shape();
    let c_in = s.channels;
    let mut out = FeatureMap::zeros(s.with_channels(c_out));
    for q in 0..c_out {
        for p in 0..c_in {
            let k = kernel_of(bank, q * c_in + p);
            for b in 0..s.batch {
                let y = circconv(x.plane(b, p), &k, s.height, s.width);
                for (o, v) in out.plane_mut(b, q).iter_mut().zip(y) {
                    *o += v;
                }
            }
        }
    }
    out
}

/// Per-pixel matrix multiply across channels plus bias.
pub fn pointwise_oracle(x: &FeatureMap<f64>, mix: &ChannelMix<f64>) -> FeatureMap<f64> {
    let s = x.shape();
    let c_out = mix.c_out();
    FeatureMap::from_fn(s.with_channels(c_out), |b, q, y, xx| {
        let mut acc = mix.bias.as_ref().map_or(0.0, |p| p.value[q]);
        for p in 0..s.channels {
            acc += mix.w(q, p) * x.at(b, p, y, xx);
        }
        acc
    })
}

/// Zero-padded strided cross-correlation by direct loops.
pub fn spatial_oracle(x: &FeatureMap<f64>, k: &SpatialKernel<f64>, stride: usize) -> FeatureMap<f64> {
    let s = x.shape();
    let m = k.size();
    let pad = (m / 2) as isize;
    let ho = (s.height + stride - 1) / stride;
    let wo = (s.width + stride - 1) / stride;
    let per = k.c_in_per_group();
    FeatureMap::from_fn(Shape4::new(s.batch, k.c_out(), ho, wo), |b, o, i, j| {
        let mut acc = 0.0;
        for ci in 0..per {
            let c = if k.depthwise { o } else { ci };
            for u in 0..m {
                for v in 0..m {
                    let y = (i * stride) as isize + u as isize - pad;
                    let xx = (j * stride) as isize + v as isize - pad;
                    if y >= 0 && xx >= 0 && (y as usize) < s.height && (xx as usize) < s.width {
                        acc += k.weight.value[((o * per + ci) * m + u) * m + v]
                            * x.at(b, c, y as usize, xx as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Relative error used by gradient checks.
pub fn rel_err(fd: f64, an: f64) -> f64 {
    let scale = fd.abs().max(an.abs());
    if scale < 1e-7 {
        (fd - an).abs()
    } else {
        (fd - an).abs() / scale
    }
}

/// Fixed random projection turning an output map into a scalar loss.
pub fn projection(shape: Shape4, seed: u64) -> FeatureMap<f64> {
    random_map(shape, &mut rng(seed))
}

pub fn dot(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `n` distinct indices in `0..len`, deterministic.
pub fn sample_indices(len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, n).into_vec()
}

/// Bank whose unshifted spectrum is the DFT of `kernel` (one per channel).
pub fn bank_of_kernels(kernels: &[Vec<f64>], h: usize, w: usize) -> SpectralFilterBank<f64> {
    let mut re = Vec::new();
    let mut im = Vec::new();
    for k in kernels {
        let kc: Vec<C64> = k.iter().map(|&v| C64::new(v, 0.0)).collect();
        let spec = naive_dft(&kc, h, w);
        for u in 0..h {
            for v in 0..w {
                // shifted position (u, v) holds frequency (u - h/2, v - w/2)
                let z = spec[((u + h - h / 2) % h) * w + (v + w - w / 2) % w];
                re.push(z.re);
                im.push(z.im);
            }
        }
    }
    SpectralFilterBank::new(kernels.len(), h, w, re, im).unwrap()
}
