//! End-to-end operations over files: train from a config, evaluate or
//! analyze a checkpoint, export kernels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{analyze_banks, extract_spatial_kernels, write_pgm_grid, AnalysisOptions, KernelAnalysisReport};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Dataset, Normalization};
use crate::error::{NiffError, Result};
use crate::model::Model;
use crate::scalar::{DType, Scalar};
use crate::train::{evaluate, stream, EpochStats, Stream, Trainer, METRICS_HEADER};

pub const CLASSES: usize = 10;
pub const EVAL_BATCH: usize = 256;
pub const CHECKPOINT_FILE: &str = "checkpoint.niff";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Clone)]
pub struct LoadedData<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub norm: Normalization,
}

impl<T: Scalar> LoadedData<T> {
    pub fn input(&self) -> (usize, usize, usize) {
        (self.train.channels, self.train.height, self.train.width)
    }
}

/// Loads both splits; normalization statistics come from the training split.
pub fn load_data<T: Scalar>(cfg: &RunConfig) -> Result<LoadedData<T>> {
    let d = &cfg.data;
    let mut train = data::load(d.dataset, &d.root, true)?;
    let mut test = data::load(d.dataset, &d.root, false)?;
    if d.train_limit > 0 {
        train.truncate(d.train_limit);
    }
    if d.test_limit > 0 {
        test.truncate(d.test_limit);
    }
    let norm = if d.normalize {
        Normalization::fit(&train)
    } else {
        Normalization::identity(train.channels)
    };
    Ok(LoadedData {
        train: Dataset::from_raw(&train, &norm)?,
        test: Dataset::from_raw(&test, &norm)?,
        norm,
    })
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.parse().map_err(|_| NiffError::Checkpoint(format!("bad number `{x}` in metadata"))))
        .collect()
}

fn parse_usizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.parse().map_err(|_| NiffError::Checkpoint(format!("bad integer `{x}` in metadata"))))
        .collect()
}

/// Everything beyond tensors that a checkpoint carries.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub config: RunConfig,
    pub epoch: usize,
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub norm: Normalization,
    /// Metric rows written so far, without header.
    pub metrics: Vec<String>,
}

impl RunMeta {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let (c, h, w) = self.input;
        let mut m = BTreeMap::new();
        m.insert("config".into(), self.config.to_text());
        m.insert("epoch".into(), self.epoch.to_string());
        m.insert("dtype".into(), self.config.model.dtype.name().into());
        m.insert("input".into(), format!("{c},{h},{w}"));
        m.insert("classes".into(), self.classes.to_string());
        m.insert(
            "rng".into(),
            format!("chacha8 seed={} next_epoch={}", self.config.train.seed, self.epoch),
        );
        m.insert("norm_mean".into(), floats(&self.norm.mean));
        m.insert("norm_std".into(), floats(&self.norm.std));
        m.insert("metrics".into(), self.metrics.join("\n"));
        m
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(ckpt.meta("config")?)
            .map_err(|e| NiffError::Checkpoint(format!("stored config: {e}")))?;
        let epoch = ckpt
            .meta("epoch")?
            .parse()
            .map_err(|_| NiffError::Checkpoint("bad epoch metadata".into()))?;
        let input = parse_usizes(ckpt.meta("input")?)?;
        if input.len() != 3 {
            return Err(NiffError::Checkpoint("input metadata needs c,h,w".into()));
        }
        let classes = ckpt
            .meta("classes")?
            .parse()
            .map_err(|_| NiffError::Checkpoint("bad classes metadata".into()))?;
        let norm = Normalization {
            mean: parse_floats(ckpt.meta("norm_mean")?)?,
            std: parse_floats(ckpt.meta("norm_std")?)?,
        };
        let metrics = ckpt
            .meta("metrics")?
            .lines()
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Ok(RunMeta {
            config,
            epoch,
            input: (input[0], input[1], input[2]),
            classes,
            norm,
            metrics,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub param_count: usize,
}

impl TrainReport {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.history.last().map(|s| s.test_acc)
    }
}

/// Trains per `cfg`, writing metrics, timings and a checkpoint after every
/// epoch into `out`. With `resume`, continues from that checkpoint.
pub fn train_run(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    match cfg.model.dtype {
        DType::F32 => train_typed::<f32>(cfg, out, resume),
        DType::F64 => train_typed::<f64>(cfg, out, resume),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let data: LoadedData<T> = load_data(cfg)?;
    train_on(cfg, &data, out, resume)
}

/// [`train_run`] on already loaded data.
pub fn train_on<T: Scalar>(
    cfg: &RunConfig,
    data: &LoadedData<T>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    fs::create_dir_all(out)?;
    let spec = cfg.model.spec(data.input(), CLASSES);
    let mut trainer = Trainer::<T>::new(&spec, &cfg.train)?;
    trainer.model.set_bank_caching(cfg.model.cache_banks);
    let mut rows: Vec<String> = Vec::new();
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        let meta = RunMeta::from_checkpoint(&ckpt)?;
        if meta.input != data.input() || meta.classes != CLASSES {
            return Err(NiffError::Checkpoint(format!(
                "checkpoint was trained on {:?} inputs, data is {:?}",
                meta.input,
                data.input()
            )));
        }
        if meta.config.train.seed != cfg.train.seed || meta.config.train.epochs != cfg.train.epochs {
            return Err(NiffError::Checkpoint(
                "resume needs the same train.seed and train.epochs as the checkpoint".into(),
            ));
        }
        trainer.opt.velocity = ckpt.restore(&mut trainer.model)?;
        trainer.epoch = meta.epoch;
        rows = meta.metrics;
    }
    let param_count = trainer.model.param_count();

    let aug = cfg.data.augment();
    let stop = if cfg.train.stop_after == 0 {
        cfg.train.epochs
    } else {
        cfg.train.stop_after.min(cfg.train.epochs)
    };
    // stop_after only controls this invocation; keep it out of the
    // checkpoint so an interrupted run saves what a full run would
    let mut stored = cfg.clone();
    stored.train.stop_after = 0;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let mut timing = String::from("epoch,train_seconds,eval_seconds\n");
    let mut history = Vec::new();
    while trainer.epoch < stop {
        let t0 = Instant::now();
        let (train_loss, train_acc, lr) = trainer.train_epoch(&data.train, &aug)?;
        let train_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let test_acc = evaluate(&mut trainer.model, &data.test, EVAL_BATCH)?;
        let eval_s = t1.elapsed().as_secs_f64();
        let stats = EpochStats {
            epoch: trainer.epoch,
            train_loss,
            train_acc,
            test_acc,
            lr,
            seconds: if cfg.train.wall_clock { train_s } else { 0.0 },
        };
        rows.push(stats.csv_row());
        history.push(stats);
        let _ = writeln!(timing, "{},{train_s:.4},{eval_s:.4}", trainer.epoch);

        let meta = RunMeta {
            config: stored.clone(),
            epoch: trainer.epoch,
            input: data.input(),
            classes: CLASSES,
            norm: data.norm.clone(),
            metrics: rows.clone(),
        };
        Checkpoint::capture(&mut trainer.model, &trainer.opt.velocity, meta.to_map()).save(&ckpt_path)?;
        let mut csv = String::from(METRICS_HEADER);
        csv.push('\n');
        for r in &rows {
            csv.push_str(r);
            csv.push('\n');
        }
        fs::write(&metrics_path, csv)?;
        fs::write(out.join(TIMING_FILE), &timing)?;
    }
    Ok(TrainReport {
        history,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        param_count,
    })
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<(Model<T>, RunMeta)> {
    let meta = RunMeta::from_checkpoint(ckpt)?;
    if meta.config.model.dtype != T::DTYPE {
        return Err(NiffError::Checkpoint(format!(
            "checkpoint stores {} weights, requested {}",
            meta.config.model.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let spec = meta.config.model.spec(meta.input, meta.classes);
    let mut model = Model::build(&spec, &mut stream(0, Stream::Init, 0))?;
    ckpt.restore(&mut model)?;
    model.set_bank_caching(meta.config.model.cache_banks);
    Ok((model, meta))
}

/// Test accuracy of a checkpoint; `data_root` overrides the stored path.
pub fn eval_checkpoint(path: &Path, data_root: Option<&Path>) -> Result<f64> {
    let ckpt = Checkpoint::load(path)?;
    match RunMeta::from_checkpoint(&ckpt)?.config.model.dtype {
        DType::F32 => eval_typed::<f32>(&ckpt, data_root),
        DType::F64 => eval_typed::<f64>(&ckpt, data_root),
    }
}

fn eval_typed<T: Scalar>(ckpt: &Checkpoint, data_root: Option<&Path>) -> Result<f64> {
    let (mut model, meta) = model_from_checkpoint::<T>(ckpt)?;
    let d = &meta.config.data;
    let root = data_root.unwrap_or(&d.root);
    let mut raw = data::load(d.dataset, root, false)?;
    if d.test_limit > 0 {
        raw.truncate(d.test_limit);
    }
    let test = Dataset::<T>::from_raw(&raw, &meta.norm)?;
    if (test.channels, test.height, test.width) != meta.input {
        return Err(NiffError::Format {
            path: root.display().to_string(),
            reason: format!(
                "test images are {}x{}x{}, checkpoint expects {:?}",
                test.channels, test.height, test.width, meta.input
            ),
        });
    }
    evaluate(&mut model, &test, EVAL_BATCH)
}

/// Runs the kernel analysis over every NIFF layer of a checkpoint.
pub fn analyze_checkpoint(path: &Path, out: &Path, threshold: Option<f64>) -> Result<KernelAnalysisReport> {
    let ckpt = Checkpoint::load(path)?;
    let meta = RunMeta::from_checkpoint(&ckpt)?;
    let mut opts: AnalysisOptions = meta.config.analysis;
    if let Some(t) = threshold {
        opts.threshold = t;
    }
    match meta.config.model.dtype {
        DType::F32 => {
            let (model, _) = model_from_checkpoint::<f32>(&ckpt)?;
            analyze_banks(&model.niff_banks(), &opts, out)
        }
        DType::F64 => {
            let (model, _) = model_from_checkpoint::<f64>(&ckpt)?;
            analyze_banks(&model.niff_banks(), &opts, out)
        }
    }
}

/// Writes the spatial kernels of one NIFF layer (`layer<i>` or `<i>`) as a
/// CSV and a PGM grid.
pub fn export_kernels(path: &Path, layer: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(path)?;
    let meta = RunMeta::from_checkpoint(&ckpt)?;
    match meta.config.model.dtype {
        DType::F32 => export_typed(&model_from_checkpoint::<f32>(&ckpt)?.0, layer, out),
        DType::F64 => export_typed(&model_from_checkpoint::<f64>(&ckpt)?.0, layer, out),
    }
}

fn export_typed<T: Scalar>(model: &Model<T>, layer: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let banks = model.niff_banks();
    let name = if layer.chars().all(|c| c.is_ascii_digit()) {
        format!("layer{layer}")
    } else {
        layer.to_string()
    };
    let lb = banks.iter().find(|b| b.name == name).ok_or_else(|| {
        let names: Vec<&str> = banks.iter().map(|b| b.name.as_str()).collect();
        NiffError::invalid(format!(
            "no NIFF layer `{name}`; available: {}",
            if names.is_empty() { "none".to_string() } else { names.join(", ") }
        ))
    })?;
    fs::create_dir_all(out)?;
    let kb = extract_spatial_kernels(&lb.bank);
    let mut csv = String::from("channel,y,x,value\n");
    for c in 0..kb.channels {
        for (i, v) in kb.kernel(c).iter().enumerate() {
            let _ = writeln!(csv, "{c},{},{},{:?}", i / kb.width, i % kb.width, v.to_f64_lossy());
        }
    }
    let csv_path = out.join(format!("{name}_kernels.csv"));
    fs::write(&csv_path, csv)?;
    let pgm_path = out.join(format!("{name}_kernels.pgm"));
    let tiles: Vec<&[T]> = (0..kb.channels).map(|c| kb.kernel(c)).collect();
    write_pgm_grid(&pgm_path, &tiles, kb.height, kb.width)?;
    Ok(vec![csv_path, pgm_path])
}
