//! Spatial-domain analysis of learned frequency filters: kernel extraction,
//! centered mass ratios, effective kernel size, and PCA of kernel banks.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex;

use crate::error::{NiffError, Result};
use crate::model::{ConvKind, LayerBank};
use crate::pca::{pca, PcaReport};
use crate::scalar::Scalar;
use crate::spectral::{roll_plane, Fft2};
use crate::synthesis::SpectralFilterBank;

/// Spatial kernels recovered from a bank, one `h x w` plane per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Centered kernels: the DC-aligned tap sits at `(h/2, w/2)`.
    pub kernels: Vec<T>,
    /// Largest imaginary magnitude dropped per channel.
    pub imag_residue: Vec<T>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn kernel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.kernels[c * n..(c + 1) * n]
    }
}

/// Inverse-transforms every channel of a shifted bank and centers the result.
pub fn extract_spatial_kernels<T: Scalar>(bank: &SpectralFilterBank<T>) -> KernelBank<T> {
    let (c, h, w) = (bank.channels(), bank.height(), bank.width());
    let n = h * w;
    let plan = Fft2::<T>::new(h, w);
    let mut scratch = plan.scratch();
    let mut kernels = vec![T::zero(); c * n];
    let mut imag_residue = vec![T::zero(); c];
    let mut shifted = vec![Complex::new(T::zero(), T::zero()); n];
    let mut plane = shifted.clone();
    let mut real = vec![T::zero(); n];
    for ch in 0..c {
        for (i, z) in shifted.iter_mut().enumerate() {
            *z = bank.weight(ch, i);
        }
        // ifftshift: roll by the ceiling halves
        roll_plane(&shifted, &mut plane, h, w, h - h / 2, w - w / 2);
        plan.inverse_plane(&mut plane, &mut scratch);
        imag_residue[ch] = plane.iter().fold(T::zero(), |m, z| m.max(z.im.abs()));
        for (r, z) in real.iter_mut().zip(&plane) {
            *r = z.re;
        }
        roll_plane(&real, &mut kernels[ch * n..(ch + 1) * n], h, w, h / 2, w / 2);
    }
    KernelBank {
        channels: c,
        height: h,
        width: w,
        kernels,
        imag_residue,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MassMode {
    /// Absolute tap values; monotone and bounded by 1.
    #[default]
    Abs,
    /// Signed tap values.
    Raw,
}

impl FromStr for MassMode {
    type Err = NiffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(MassMode::Abs),
            "raw" => Ok(MassMode::Raw),
            other => Err(NiffError::Config(format!("unknown mass mode `{other}` (abs|raw)"))),
        }
    }
}

impl fmt::Display for MassMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MassMode::Abs => "abs",
            MassMode::Raw => "raw",
        })
    }
}

/// First index covered by a centered window of `width` taps on an axis of `n`.
fn window_start(n: usize, width: usize) -> usize {
    n / 2 - width / 2
}

/// Fraction of a centered kernel's mass inside the centered `window x window`
/// square. An all-zero kernel reports 1.
pub fn mass_ratio<T: Scalar>(plane: &[T], h: usize, w: usize, window: usize, mode: MassMode) -> Result<T> {
    if plane.len() != h * w {
        return Err(NiffError::shape(format!(
            "kernel plane has {} taps, expected {h}x{w}",
            plane.len()
        )));
    }
    if window == 0 || window > h.min(w) {
        return Err(NiffError::invalid(format!(
            "window {window} outside 1..={}",
            h.min(w)
        )));
    }
    let mass = |v: T| match mode {
        MassMode::Abs => v.abs(),
        MassMode::Raw => v,
    };
    let total: T = plane.iter().map(|v| mass(*v)).sum();
    if total == T::zero() {
        return Ok(T::one());
    }
    if window == h.min(w) && h == w {
        return Ok(T::one());
    }
    let (y0, x0) = (window_start(h, window), window_start(w, window));
    let mut inside = T::zero();
    for y in y0..y0 + window {
        for x in x0..x0 + window {
            inside += mass(plane[y * w + x]);
        }
    }
    Ok(inside / total)
}

/// Mass-ratio curve over every square window of a kernel bank.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMassCurve<T> {
    pub sizes: Vec<usize>,
    /// Mean over kernels, per size.
    pub ratios: Vec<T>,
    /// `per_kernel[c][i]` is kernel `c`'s ratio at `sizes[i]`.
    pub per_kernel: Vec<Vec<T>>,
}

impl<T: Scalar> KernelMassCurve<T> {
    pub fn compute(bank: &KernelBank<T>, mode: MassMode) -> Result<Self> {
        let max = bank.height.min(bank.width);
        let sizes: Vec<usize> = (1..=max).collect();
        let per_kernel = (0..bank.channels)
            .map(|c| {
                sizes
                    .iter()
                    .map(|&s| mass_ratio(bank.kernel(c), bank.height, bank.width, s, mode))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let n = T::of_usize(bank.channels.max(1));
        let ratios = (0..sizes.len())
            .map(|i| per_kernel.iter().map(|r| r[i]).sum::<T>() / n)
            .collect();
        Ok(KernelMassCurve {
            sizes,
            ratios,
            per_kernel,
        })
    }

    /// Smallest window reaching `threshold` for each kernel.
    pub fn effective_sizes(&self, threshold: T) -> Vec<usize> {
        self.per_kernel
            .iter()
            .map(|r| {
                r.iter()
                    .position(|v| *v >= threshold)
                    .map_or(*self.sizes.last().unwrap_or(&0), |i| self.sizes[i])
            })
            .collect()
    }
}

/// Smallest centered window of one kernel whose mass ratio reaches `threshold`.
pub fn effective_kernel_size<T: Scalar>(
    plane: &[T],
    h: usize,
    w: usize,
    threshold: T,
    mode: MassMode,
) -> Result<usize> {
    let max = h.min(w);
    for s in 1..=max {
        if mass_ratio(plane, h, w, s, mode)? >= threshold {
            return Ok(s);
        }
    }
    Ok(max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub threshold: f64,
    pub mass_mode: MassMode,
    /// Components drawn in the PCA grids.
    pub pca_components: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            threshold: 0.95,
            mass_mode: MassMode::Abs,
            pca_components: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub kind: ConvKind,
    pub height: usize,
    pub width: usize,
    pub kernels: usize,
    pub effective_sizes: Vec<usize>,
    pub mean_effective_size: f64,
    /// Share of kernels whose effective size is below the feature-map side.
    pub frac_below_map: f64,
    pub max_imag_residue: f64,
    pub spatial_variance: Vec<f64>,
    pub freq_re_variance: Vec<f64>,
    pub freq_im_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelAnalysisReport {
    pub threshold: f64,
    pub layers: Vec<LayerReport>,
    pub files: Vec<PathBuf>,
}

impl KernelAnalysisReport {
    /// Share of all kernels, over every layer, smaller than their feature map.
    pub fn frac_below_map(&self) -> f64 {
        let (mut below, mut total) = (0usize, 0usize);
        for l in &self.layers {
            let side = l.height.min(l.width);
            below += l.effective_sizes.iter().filter(|&&s| s < side).count();
            total += l.effective_sizes.len();
        }
        if total == 0 {
            0.0
        } else {
            below as f64 / total as f64
        }
    }
}

fn ratios_f64<T: Scalar>(r: &PcaReport<T>) -> Vec<f64> {
    r.explained_variance_ratio.iter().map(|v| v.to_f64_lossy()).collect()
}

/// Analyzes named banks and writes CSV and PGM artifacts into `out`.
pub fn analyze_banks<T: Scalar>(
    banks: &[LayerBank<T>],
    opts: &AnalysisOptions,
    out: &Path,
) -> Result<KernelAnalysisReport> {
    if banks.is_empty() {
        return Err(NiffError::invalid(
            "no NIFF layers to analyze: the model contains only spatial or pointwise convolutions",
        ));
    }
    if !(opts.threshold > 0.0 && opts.threshold <= 1.0) {
        return Err(NiffError::Config(format!(
            "analysis threshold {} must lie in (0, 1]",
            opts.threshold
        )));
    }
    fs::create_dir_all(out)?;
    let threshold = T::of(opts.threshold);
    let mut mass_csv = String::from("layer,channel,window,ratio\n");
    let mut pca_csv = String::from("layer,domain,component,explained_variance\n");
    let mut summary = String::from(
        "layer,kind,height,width,kernels,mean_effective_size,frac_below_map,max_imag_residue\n",
    );
    let mut layers = Vec::new();
    let mut files = Vec::new();

    for lb in banks {
        let bank = &lb.bank;
        let (h, w, c) = (bank.height(), bank.width(), bank.channels());
        let kernels = extract_spatial_kernels(bank);
        let curve = KernelMassCurve::compute(&kernels, opts.mass_mode)?;
        for (ch, r) in curve.per_kernel.iter().enumerate() {
            for (s, v) in curve.sizes.iter().zip(r) {
                mass_csv.push_str(&format!("{},{ch},{s},{}\n", lb.name, v.to_f64_lossy()));
            }
        }
        let eff = curve.effective_sizes(threshold);
        let side = h.min(w);
        let mean_eff = eff.iter().sum::<usize>() as f64 / eff.len().max(1) as f64;
        let frac = eff.iter().filter(|&&s| s < side).count() as f64 / eff.len().max(1) as f64;
        let max_res = kernels
            .imag_residue
            .iter()
            .fold(0.0f64, |m, v| m.max(v.to_f64_lossy()));

        let n = h * w;
        let spatial = pca(&kernels.kernels, c, n, None)?;
        let freq_re = pca(bank.re(), c, n, None)?;
        let freq_im = pca(bank.im(), c, n, None)?;
        for (domain, r) in [("spatial", &spatial), ("freq_re", &freq_re), ("freq_im", &freq_im)] {
            for (i, v) in r.explained_variance_ratio.iter().enumerate() {
                pca_csv.push_str(&format!("{},{domain},{i},{}\n", lb.name, v.to_f64_lossy()));
            }
        }
        summary.push_str(&format!(
            "{},{},{h},{w},{c},{mean_eff},{frac},{max_res}\n",
            lb.name, lb.kind
        ));

        let grids: [(&str, Vec<&[T]>); 4] = [
            ("kernels", (0..c).map(|i| kernels.kernel(i)).collect()),
            ("pca_spatial", top(&spatial, opts.pca_components)),
            ("pca_freq_re", top(&freq_re, opts.pca_components)),
            ("pca_freq_im", top(&freq_im, opts.pca_components)),
        ];
        for (suffix, tiles) in grids {
            let path = out.join(format!("{}_{suffix}.pgm", lb.name));
            write_pgm_grid(&path, &tiles, h, w)?;
            files.push(path);
        }

        layers.push(LayerReport {
            name: lb.name.clone(),
            kind: lb.kind,
            height: h,
            width: w,
            kernels: c,
            effective_sizes: eff,
            mean_effective_size: mean_eff,
            frac_below_map: frac,
            max_imag_residue: max_res,
            spatial_variance: ratios_f64(&spatial),
            freq_re_variance: ratios_f64(&freq_re),
            freq_im_variance: ratios_f64(&freq_im),
        });
    }

    for (name, body) in [
        ("mass_ratio.csv", &mass_csv),
        ("pca.csv", &pca_csv),
        ("summary.csv", &summary),
    ] {
        let path = out.join(name);
        fs::write(&path, body)?;
        files.push(path);
    }
    Ok(KernelAnalysisReport {
        threshold: opts.threshold,
        layers,
        files,
    })
}

fn top<T: Scalar>(r: &PcaReport<T>, k: usize) -> Vec<&[T]> {
    r.components.iter().take(k.max(1)).map(|v| v.as_slice()).collect()
}

/// Writes tiles side by side (at most 8 per row) as a binary graymap. Each
/// tile is scaled by its own peak magnitude with zero at mid-gray.
pub fn write_pgm_grid<T: Scalar>(path: &Path, tiles: &[&[T]], h: usize, w: usize) -> Result<()> {
    let cols = tiles.len().clamp(1, 8);
    let rows = tiles.len().div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut img = vec![0u8; gw * gh];
    for (t, tile) in tiles.iter().enumerate() {
        let peak = tile.iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy().abs()));
        let (oy, ox) = ((t / cols) * (h + 1) + 1, (t % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let v = tile[y * w + x].to_f64_lossy();
                let g = if peak > 0.0 { 127.5 + 127.5 * v / peak } else { 127.5 };
                img[(oy + y) * gw + ox + x] = g.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{gw} {gh}\n255\n")?;
    f.write_all(&img)?;
    Ok(())
}
