//! Run configuration: a flat `section.key = value` document.
//!
//! Blank lines and text after `#` are ignored. Every key has a default, so an
//! empty document is a valid configuration. Unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key in a fixed order and is
//! what checkpoints store.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::{AnalysisOptions, MassMode};
use crate::data::{Augment, DatasetKind};
use crate::error::{NiffError, Result};
use crate::model::{ArchOptions, BlockStyle, FullImpl, KernelSize, ModelSpec, Variant};
use crate::scalar::DType;
use crate::synthesis::{Activation, GridNorm, Preset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Plain,
    Resnet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub variant: Variant,
    pub block: BlockStyle,
    pub full_impl: FullImpl,
    pub channels: Vec<usize>,
    pub preset: Preset,
    pub mlp_activation: Activation,
    pub grid_norm: GridNorm,
    pub kernel: KernelSize,
    pub dtype: DType,
    pub cache_banks: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Plain,
            variant: Variant::Niff,
            block: BlockStyle::Separable,
            full_impl: FullImpl::Decomposed,
            channels: vec![16, 32, 64],
            preset: Preset::CifarSmall,
            mlp_activation: Activation::Relu,
            grid_norm: GridNorm::Normalized,
            kernel: KernelSize::Fixed(3),
            dtype: DType::F32,
            cache_banks: true,
        }
    }
}

impl ModelConfig {
    pub fn arch_options(&self) -> ArchOptions {
        ArchOptions {
            variant: self.variant,
            block: self.block,
            full_impl: self.full_impl,
            preset: self.preset,
            mlp_activation: self.mlp_activation,
            grid_norm: self.grid_norm,
            kernel: self.kernel,
        }
    }

    pub fn spec(&self, input: (usize, usize, usize), classes: usize) -> ModelSpec {
        let opts = self.arch_options();
        match self.arch {
            Arch::Plain => ModelSpec::plain(input, &self.channels, classes, &opts),
            Arch::Resnet => ModelSpec::resnet(input, &self.channels, classes, &opts),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Record measured epoch time in the metrics log; off keeps logs
    /// reproducible byte for byte.
    pub wall_clock: bool,
    /// Stop after this many epochs without altering the schedule (0 = run all).
    pub stop_after: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.002,
            label_smoothing: 0.1,
            seed: 0,
            wall_clock: false,
            stop_after: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NiffError::Config("train.epochs and train.batch_size must be positive".into()));
        }
        for (name, v) in [
            ("train.lr", self.lr),
            ("train.momentum", self.momentum),
            ("train.weight_decay", self.weight_decay),
            ("train.label_smoothing", self.label_smoothing),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(NiffError::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if self.momentum >= 1.0 || self.label_smoothing >= 1.0 {
            return Err(NiffError::Config(
                "train.momentum and train.label_smoothing must be below 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub root: PathBuf,
    /// Keep only the first n training samples (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub pad: usize,
    pub flip_prob: f64,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            root: PathBuf::from("data/mnist5k"),
            train_limit: 0,
            test_limit: 0,
            pad: 2,
            flip_prob: 0.0,
            normalize: true,
        }
    }
}

impl DataConfig {
    pub fn augment(&self) -> Augment {
        Augment {
            pad: self.pad,
            flip_prob: self.flip_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub m_list: Vec<usize>,
    pub channels: usize,
    pub batch: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub epochs: usize,
    pub train_samples: usize,
    /// Largest N at which the full-size spatial kernel is timed.
    pub full_max_n: usize,
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_list: vec![16, 32, 64, 128],
            m_list: vec![1, 3, 5, 7, 9],
            channels: 8,
            batch: 4,
            iterations: 20,
            warmup: 5,
            epochs: 3,
            train_samples: 512,
            full_max_n: 64,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisOptions,
    pub bench: BenchConfig,
}

/// Every key with its one-line description, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("model.arch", "plain | resnet"),
    ("model.variant", "niff | spatial"),
    ("model.block", "separable | full"),
    ("model.full_impl", "decomposed | full (NIFF full blocks)"),
    ("model.channels", "comma-separated stage widths"),
    ("model.preset", "cifar_small | imagenet_light | imagenet_large"),
    ("model.mlp_activation", "relu | silu | gelu"),
    ("model.grid_norm", "normalized | index"),
    ("model.kernel", "spatial kernel side (odd) or `full`"),
    ("model.dtype", "f32 | f64"),
    ("model.cache_banks", "reuse synthesized banks at eval time"),
    ("train.epochs", "number of epochs"),
    ("train.batch_size", "samples per step"),
    ("train.lr", "initial learning rate (cosine decay to 0)"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "L2 coefficient"),
    ("train.label_smoothing", "cross-entropy smoothing"),
    ("train.seed", "seed for init, augmentation and shuffling"),
    ("train.wall_clock", "write measured epoch seconds to the metrics log"),
    ("train.stop_after", "stop after this many epochs (0 = all)"),
    ("data.dataset", "mnist | cifar10"),
    ("data.root", "directory holding the dataset files"),
    ("data.train_limit", "use the first n training samples (0 = all)"),
    ("data.test_limit", "use the first n test samples (0 = all)"),
    ("data.pad", "zero padding before random crop"),
    ("data.flip_prob", "horizontal flip probability"),
    ("data.normalize", "per-channel mean/std normalization"),
    ("analysis.threshold", "mass ratio defining the effective kernel size"),
    ("analysis.mass_mode", "abs | raw"),
    ("analysis.pca_components", "components drawn in PCA grids"),
    ("bench.n_list", "feature-map sides"),
    ("bench.m_list", "spatial kernel sides"),
    ("bench.channels", "channels per benchmark op"),
    ("bench.batch", "batch size per benchmark op"),
    ("bench.iterations", "timed iterations per point (>= 20)"),
    ("bench.warmup", "untimed iterations per point"),
    ("bench.epochs", "epochs per model in the overhead benchmark"),
    ("bench.train_samples", "training samples per overhead epoch"),
    ("bench.full_max_n", "largest N for the full-size kernel comparison"),
    ("bench.parallel", "allow the multi-threaded FFT path"),
];

fn bad(key: &str, value: &str, want: &str) -> NiffError {
    NiffError::Config(format!("{key} = `{value}`: expected {want}"))
}

fn num<V: std::str::FromStr>(key: &str, v: &str, want: &str) -> Result<V> {
    v.parse().map_err(|_| bad(key, v, want))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = v
        .split(',')
        .map(|s| num::<usize>(key, s.trim(), "comma-separated positive integers"))
        .collect::<Result<_>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(bad(key, v, "comma-separated positive integers"));
    }
    Ok(out)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                NiffError::Config(format!("line {}: expected `section.key = value`, got `{line}`", no + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(NiffError::Config(format!("line {}: `{key}` set twice", no + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| NiffError::Config(format!("line {}: {}", no + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NiffError::Format {
            path: path.display().to_string(),
            reason: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let KernelSize::Fixed(m) = self.model.kernel {
            if m % 2 == 0 {
                return Err(NiffError::Config(format!("model.kernel = {m} must be odd")));
            }
        }
        if !(0.0..=1.0).contains(&self.data.flip_prob) {
            return Err(NiffError::Config("data.flip_prob must lie in [0, 1]".into()));
        }
        if self.bench.iterations < 20 {
            return Err(NiffError::Config("bench.iterations must be at least 20".into()));
        }
        if !(self.analysis.threshold > 0.0 && self.analysis.threshold <= 1.0) {
            return Err(NiffError::Config("analysis.threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        let a = &mut self.analysis;
        let b = &mut self.bench;
        match key {
            "model.arch" => {
                m.arch = match v {
                    "plain" => Arch::Plain,
                    "resnet" => Arch::Resnet,
                    _ => return Err(bad(key, v, "plain or resnet")),
                }
            }
            "model.variant" => {
                m.variant = match v {
                    "niff" => Variant::Niff,
                    "spatial" => Variant::Spatial,
                    _ => return Err(bad(key, v, "niff or spatial")),
                }
            }
            "model.block" => {
                m.block = match v {
                    "separable" => BlockStyle::Separable,
                    "full" => BlockStyle::Full,
                    _ => return Err(bad(key, v, "separable or full")),
                }
            }
            "model.full_impl" => {
                m.full_impl = match v {
                    "decomposed" => FullImpl::Decomposed,
                    "full" => FullImpl::Full,
                    _ => return Err(bad(key, v, "decomposed or full")),
                }
            }
            "model.channels" => m.channels = list(key, v)?,
            "model.preset" => m.preset = v.parse().map_err(|_| bad(key, v, "a preset name"))?,
            "model.mlp_activation" => {
                m.mlp_activation = v.parse().map_err(|_| bad(key, v, "relu, silu or gelu"))?
            }
            "model.grid_norm" => {
                m.grid_norm = v.parse().map_err(|_| bad(key, v, "normalized or index"))?
            }
            "model.kernel" => {
                m.kernel = if v == "full" {
                    KernelSize::FullResolution
                } else {
                    KernelSize::Fixed(num(key, v, "an odd integer or `full`")?)
                }
            }
            "model.dtype" => {
                m.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(bad(key, v, "f32 or f64")),
                }
            }
            "model.cache_banks" => m.cache_banks = boolean(key, v)?,
            "train.epochs" => t.epochs = num(key, v, "an integer")?,
            "train.batch_size" => t.batch_size = num(key, v, "an integer")?,
            "train.lr" => t.lr = num(key, v, "a number")?,
            "train.momentum" => t.momentum = num(key, v, "a number")?,
            "train.weight_decay" => t.weight_decay = num(key, v, "a number")?,
            "train.label_smoothing" => t.label_smoothing = num(key, v, "a number")?,
            "train.seed" => t.seed = num(key, v, "an unsigned integer")?,
            "train.wall_clock" => t.wall_clock = boolean(key, v)?,
            "train.stop_after" => t.stop_after = num(key, v, "an integer")?,
            "data.dataset" => d.dataset = v.parse().map_err(|_| bad(key, v, "mnist or cifar10"))?,
            "data.root" => d.root = PathBuf::from(v),
            "data.train_limit" => d.train_limit = num(key, v, "an integer")?,
            "data.test_limit" => d.test_limit = num(key, v, "an integer")?,
            "data.pad" => d.pad = num(key, v, "an integer")?,
            "data.flip_prob" => d.flip_prob = num(key, v, "a number")?,
            "data.normalize" => d.normalize = boolean(key, v)?,
            "analysis.threshold" => a.threshold = num(key, v, "a number")?,
            "analysis.mass_mode" => a.mass_mode = v.parse::<MassMode>().map_err(|_| bad(key, v, "abs or raw"))?,
            "analysis.pca_components" => a.pca_components = num(key, v, "an integer")?,
            "bench.n_list" => b.n_list = list(key, v)?,
            "bench.m_list" => b.m_list = list(key, v)?,
            "bench.channels" => b.channels = num(key, v, "an integer")?,
            "bench.batch" => b.batch = num(key, v, "an integer")?,
            "bench.iterations" => b.iterations = num(key, v, "an integer")?,
            "bench.warmup" => b.warmup = num(key, v, "an integer")?,
            "bench.epochs" => b.epochs = num(key, v, "an integer")?,
            "bench.train_samples" => b.train_samples = num(key, v, "an integer")?,
            "bench.full_max_n" => b.full_max_n = num(key, v, "an integer")?,
            "bench.parallel" => b.parallel = boolean(key, v)?,
            _ => return Err(NiffError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, d, a, b) = (&self.model, &self.train, &self.data, &self.analysis, &self.bench);
        Some(match key {
            "model.arch" => match m.arch {
                Arch::Plain => "plain".into(),
                Arch::Resnet => "resnet".into(),
            },
            "model.variant" => match m.variant {
                Variant::Niff => "niff".into(),
                Variant::Spatial => "spatial".into(),
            },
            "model.block" => match m.block {
                BlockStyle::Separable => "separable".into(),
                BlockStyle::Full => "full".into(),
            },
            "model.full_impl" => match m.full_impl {
                FullImpl::Decomposed => "decomposed".into(),
                FullImpl::Full => "full".into(),
            },
            "model.channels" => join(&m.channels),
            "model.preset" => m.preset.to_string(),
            "model.mlp_activation" => m.mlp_activation.to_string(),
            "model.grid_norm" => m.grid_norm.to_string(),
            "model.kernel" => match m.kernel {
                KernelSize::Fixed(k) => k.to_string(),
                KernelSize::FullResolution => "full".into(),
            },
            "model.dtype" => m.dtype.name().into(),
            "model.cache_banks" => m.cache_banks.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => format!("{:?}", t.lr),
            "train.momentum" => format!("{:?}", t.momentum),
            "train.weight_decay" => format!("{:?}", t.weight_decay),
            "train.label_smoothing" => format!("{:?}", t.label_smoothing),
            "train.seed" => t.seed.to_string(),
            "train.wall_clock" => t.wall_clock.to_string(),
            "train.stop_after" => t.stop_after.to_string(),
            "data.dataset" => d.dataset.to_string(),
            "data.root" => d.root.display().to_string(),
            "data.train_limit" => d.train_limit.to_string(),
            "data.test_limit" => d.test_limit.to_string(),
            "data.pad" => d.pad.to_string(),
            "data.flip_prob" => format!("{:?}", d.flip_prob),
            "data.normalize" => d.normalize.to_string(),
            "analysis.threshold" => format!("{:?}", a.threshold),
            "analysis.mass_mode" => a.mass_mode.to_string(),
            "analysis.pca_components" => a.pca_components.to_string(),
            "bench.n_list" => join(&b.n_list),
            "bench.m_list" => join(&b.m_list),
            "bench.channels" => b.channels.to_string(),
            "bench.batch" => b.batch.to_string(),
            "bench.iterations" => b.iterations.to_string(),
            "bench.warmup" => b.warmup.to_string(),
            "bench.epochs" => b.epochs.to_string(),
            "bench.train_samples" => b.train_samples.to_string(),
            "bench.full_max_n" => b.full_max_n.to_string(),
            "bench.parallel" => b.parallel.to_string(),
            _ => return None,
        })
    }

    /// Every key in [`KEYS`] order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let v = self.get(key).expect("every listed key is readable");
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    /// Defaults with their descriptions, as a commented document.
    pub fn documented_defaults() -> String {
        let cfg = RunConfig::default();
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", cfg.get(key).expect("listed key"));
        }
        out
    }
}

fn strip(e: NiffError) -> String {
    match e {
        NiffError::Config(s) => s,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let text = "model.variant = spatial\nmodel.channels = 4, 8\ntrain.lr = 0.1 # faster\nmodel.kernel = full\nanalysis.mass_mode = raw\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.channels, vec![4, 8]);
        assert_eq!(cfg.model.kernel, KernelSize::FullResolution);
        assert_eq!(cfg.train.lr, 0.1);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::documented_defaults()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_settable_and_listed() {
        let mut cfg = RunConfig::default();
        for (key, _) in KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap();
        }
        assert!(cfg.get("model.nope").is_none());
    }

    #[test]
    fn rejections() {
        for text in [
            "model.depth = 3",
            "train.lr = fast",
            "model.kernel = 4",
            "train.epochs = 0",
            "train.seed = 1\ntrain.seed = 2",
            "no equals sign",
            "bench.iterations = 5",
            "model.channels = 4,0",
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(matches!(e, NiffError::Config(_)), "{text}: {e}");
        }
        let e = RunConfig::parse("\n\nmodel.depth = 3").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("model.depth"), "{e}");
    }
}
