//! Dataset ingestion (MNIST IDX, CIFAR-10 binary) and train-time augmentation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::error::{NiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Shape4};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl FromStr for DatasetKind {
    type Err = NiffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" | "mnist_idx" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar10_binary" => Ok(DatasetKind::Cifar10),
            other => Err(NiffError::Config(format!(
                "unknown dataset `{other}` (mnist|cifar10)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

/// Undecoded 8-bit images, `n x c x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// First `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * self.sample_len());
        }
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> NiffError {
    NiffError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| format_err(path, format!("cannot read: {e}")))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX image file: `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(format_err(path, format!("{} bytes is too short for an IDX image header", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES {
        return Err(format_err(
            path,
            format!("bad IDX image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        ));
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let want = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(path, format!("header size {n}x{rows}x{cols} overflows")))?;
    let body = &bytes[16..];
    if body.len() < want {
        return Err(format_err(
            path,
            format!("header promises {n} images of {rows}x{cols} ({want} bytes) but only {} follow", body.len()),
        ));
    }
    Ok((n, rows, cols, body[..want].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(format_err(path, format!("{} bytes is too short for an IDX label header", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS {
        return Err(format_err(
            path,
            format!("bad IDX label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 < n {
        return Err(format_err(
            path,
            format!("header promises {n} labels but only {} follow", bytes.len() - 8),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Loads `train-*` or `t10k-*` IDX files from `root`.
pub fn load_mnist(root: &Path, train: bool) -> Result<RawDataset> {
    let prefix = if train { "train" } else { "t10k" };
    let ip = root.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = root.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, h, w, pixels) = parse_idx_images(&read(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read(&lp)?, &lp)?;
    if labels.len() != n {
        return Err(format_err(
            &lp,
            format!("{} labels for {n} images in {}", labels.len(), ip.display()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(format_err(&lp, format!("label {bad} outside 0..=9")));
    }
    Ok(RawDataset {
        channels: 1,
        height: h,
        width: w,
        pixels,
        labels,
    })
}

/// Parses concatenated CIFAR-10 records (label byte + 3072 planar pixels).
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<RawDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            path,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte CIFAR-10 records",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(format_err(path, format!("label {} outside 0..=9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(RawDataset {
        channels: 3,
        height: 32,
        width: 32,
        pixels,
        labels,
    })
}

fn cifar_files(root: &Path, train: bool) -> Vec<PathBuf> {
    if train {
        (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect()
    } else {
        vec![root.join("test_batch.bin")]
    }
}

/// Loads the CIFAR-10 binary batches from `root`.
pub fn load_cifar10(root: &Path, train: bool) -> Result<RawDataset> {
    let mut all: Option<RawDataset> = None;
    for path in cifar_files(root, train) {
        let part = parse_cifar10(&read(&path)?, &path)?;
        match &mut all {
            None => all = Some(part),
            Some(a) => {
                a.pixels.extend(part.pixels);
                a.labels.extend(part.labels);
            }
        }
    }
    all.ok_or_else(|| format_err(root, "no CIFAR-10 batch files"))
}

pub fn load(kind: DatasetKind, root: &Path, train: bool) -> Result<RawDataset> {
    match kind {
        DatasetKind::Mnist => load_mnist(root, train),
        DatasetKind::Cifar10 => load_cifar10(root, train),
    }
}

/// Per-channel affine map applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Channel statistics of a dataset.
    pub fn fit(raw: &RawDataset) -> Self {
        let (c, plane) = (raw.channels, raw.height * raw.width);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for sample in raw.pixels.chunks(raw.sample_len()) {
            for ch in 0..c {
                for &p in &sample[ch * plane..(ch + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (raw.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Normalization { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Normalized images ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<T>,
    pub labels: Vec<u8>,
    /// Value of a black pixel after normalization, per channel; used as the
    /// padding fill.
    pub fill: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_raw(raw: &RawDataset, norm: &Normalization) -> Result<Self> {
        if norm.mean.len() != raw.channels || norm.std.len() != raw.channels {
            return Err(NiffError::Config(format!(
                "normalization has {} channels, data has {}",
                norm.mean.len(),
                raw.channels
            )));
        }
        let plane = raw.height * raw.width;
        let mut images = Vec::with_capacity(raw.pixels.len());
        for (i, &p) in raw.pixels.iter().enumerate() {
            let c = (i / plane) % raw.channels;
            images.push(T::of((p as f64 / 255.0 - norm.mean[c]) / norm.std[c]));
        }
        let fill = (0..raw.channels)
            .map(|c| T::of(-norm.mean[c] / norm.std[c]))
            .collect();
        Ok(Dataset {
            channels: raw.channels,
            height: raw.height,
            width: raw.width,
            images,
            labels: raw.labels.clone(),
            fill,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the given samples without augmentation.
    pub fn batch(&self, idx: &[usize]) -> (FeatureMap<T>, Vec<u8>) {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let shape = Shape4::new(idx.len(), self.channels, self.height, self.width);
        let x = FeatureMap::from_vec(shape, data).expect("consistent batch length");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Stacks the given samples with a random pad-crop and optional flip each.
    pub fn augmented_batch(&self, idx: &[usize], aug: &Augment, rng: &mut impl Rng) -> (FeatureMap<T>, Vec<u8>) {
        let n = self.sample_len();
        let mut data = vec![T::zero(); idx.len() * n];
        for (dst, &i) in data.chunks_mut(n).zip(idx) {
            let oy = rng.gen_range(0..=2 * aug.pad);
            let ox = rng.gen_range(0..=2 * aug.pad);
            let flip = aug.flip_prob > 0.0 && rng.gen::<f64>() < aug.flip_prob;
            self.augment_into(i, aug.pad, (oy, ox), flip, dst);
        }
        let shape = Shape4::new(idx.len(), self.channels, self.height, self.width);
        let x = FeatureMap::from_vec(shape, data).expect("consistent batch length");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Pads sample `i` by `pad` on every side, crops at `offset` in the padded
    /// image, and optionally mirrors horizontally.
    pub fn augment_into(&self, i: usize, pad: usize, offset: (usize, usize), flip: bool, dst: &mut [T]) {
        let (h, w) = (self.height, self.width);
        let src = self.sample(i);
        for c in 0..self.channels {
            let sp = &src[c * h * w..(c + 1) * h * w];
            let dp = &mut dst[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                let sy = (y + offset.0) as isize - pad as isize;
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = (xx + offset.1) as isize - pad as isize;
                    dp[y * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        sp[sy as usize * w + sx as usize]
                    } else {
                        self.fill[c]
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub pad: usize,
    pub flip_prob: f64,
}

impl Augment {
    pub fn none() -> Self {
        Augment {
            pad: 0,
            flip_prob: 0.0,
        }
    }
}

/// Writes an IDX image file (used by tests and tooling).
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
