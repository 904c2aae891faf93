//! Wall-clock microbenchmarks of spatial vs frequency-domain convolution and
//! of whole training epochs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchConfig, RunConfig};
use crate::conv::{depthwise_forward, spatial_forward, SpatialKernel};
use crate::data::Dataset;
use crate::error::{NiffError, Result};
use crate::model::Variant;
use crate::run::{load_data, LoadedData, CLASSES};
use crate::spectral::{roll_plane, Fft2};
use crate::synthesis::SpectralFilterBank;
use crate::tensor::{FeatureMap, Shape4};
use crate::train::{evaluate, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub op: String,
    /// Feature-map side.
    pub n: usize,
    /// Kernel side.
    pub m: usize,
    pub c: usize,
    pub b: usize,
    pub median_ns: f64,
    pub iterations: usize,
}

pub const BENCH_HEADER: &str = "op,N,M,C,B,median_ns,iterations";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.0},{}",
            self.op, self.n, self.m, self.c, self.b, self.median_ns, self.iterations
        )
    }
}

/// Least-squares slope of `ln y` against `ln x` (`None` with fewer than two
/// distinct points).
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median nanoseconds of `f` over `iterations` runs after `warmup` runs.
pub fn time_median(warmup: usize, iterations: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let samples = (0..iterations.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    median(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slope {
    pub op: String,
    /// `"N"` or `"M"`.
    pub along: &'static str,
    /// Value of the other size held fixed.
    pub fixed: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<Slope>,
    /// Smallest swept N from which the frequency path beats a full-size
    /// spatial kernel at every larger swept N (up to `full_max_n`).
    pub crossover: Option<usize>,
}

impl BenchReport {
    pub fn slope(&self, op: &str, along: &str, fixed: usize) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.op == op && s.along == along && s.fixed == fixed)
            .map(|s| s.slope)
    }

    pub fn to_csv(&self) -> String {
        rows_csv(&self.rows)
    }

    pub fn fit_csv(&self) -> String {
        let mut out = String::from("op,along,fixed,slope\n");
        for s in &self.slopes {
            let _ = writeln!(out, "{},{},{},{:.4}", s.op, s.along, s.fixed, s.slope);
        }
        let _ = writeln!(
            out,
            "crossover,N,0,{}",
            self.crossover.map_or("none".to_string(), |n| n.to_string())
        );
        out
    }
}

/// Largest odd side not above `n`.
fn full_kernel_side(n: usize) -> usize {
    if n % 2 == 0 {
        n - 1
    } else {
        n
    }
}

/// Shifted spectrum of a depthwise spatial kernel placed on an `n x n` grid.
fn bank_of_kernel(k: &SpatialKernel<f32>, n: usize) -> SpectralFilterBank<f32> {
    let (c, m) = (k.c_out(), k.size());
    let plan = Fft2::<f32>::new(n, n);
    let mut scratch = plan.scratch();
    let mut re = vec![0.0f32; c * n * n];
    let mut im = vec![0.0f32; c * n * n];
    let zero = num_complex::Complex::new(0.0f32, 0.0);
    let mut plane = vec![zero; n * n];
    let mut shifted = plane.clone();
    for ch in 0..c {
        plane.iter_mut().for_each(|z| *z = zero);
        for u in 0..m {
            for v in 0..m {
                // tap (u, v) sits at offset (u - m/2, v - m/2) from the origin
                let y = (u + n - m / 2) % n;
                let x = (v + n - m / 2) % n;
                plane[y * n + x].re += k.weight.value[(ch * m + u) * m + v];
            }
        }
        plan.forward_plane(&mut plane, &mut scratch);
        roll_plane(&plane, &mut shifted, n, n, n / 2, n / 2);
        for (i, z) in shifted.iter().enumerate() {
            re[ch * n * n + i] = z.re;
            im[ch * n * n + i] = z.im;
        }
    }
    SpectralFilterBank::new(c, n, n, re, im).expect("consistent bank")
}

/// Spatial vs frequency depthwise convolution over `N x M`, plus the
/// full-size kernel case `M ~ N`. The frequency path reuses a precomputed
/// bank, so its cost should not depend on `M`.
pub fn sweep_conv(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.n_list.is_empty() || cfg.m_list.is_empty() || cfg.channels == 0 || cfg.batch == 0 {
        return Err(NiffError::invalid("benchmark sizes must be non-empty and positive"));
    }
    let mut ns = cfg.n_list.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (c, b) = (cfg.channels, cfg.batch);
    let mut rows = Vec::new();
    let mut push = |op: &str, n: usize, m: usize, t: f64| {
        rows.push(BenchRow {
            op: op.into(),
            n,
            m,
            c,
            b,
            median_ns: t,
            iterations: cfg.iterations,
        })
    };
    for &n in &ns {
        let x = FeatureMap::<f32>::from_fn(Shape4::new(b, c, n, n), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let plan = Fft2::<f32>::new(n, n);
        for &m in &cfg.m_list {
            if m % 2 == 0 || m > n {
                continue;
            }
            let k = SpatialKernel::<f32>::init(c, c, m, true, &mut rng);
            let t = time_median(cfg.warmup, cfg.iterations, || {
                std::hint::black_box(spatial_forward(&x, &k, 1).expect("valid shapes"));
            });
            push("spatial", n, m, t);
            let bank = bank_of_kernel(&k, n);
            let t = time_median(cfg.warmup, cfg.iterations, || {
                std::hint::black_box(depthwise_forward(&plan, &x, &bank, false).expect("valid shapes"));
            });
            push("frequency", n, m, t);
        }
        if n > cfg.full_max_n {
            continue;
        }
        let m = full_kernel_side(n);
        let k = SpatialKernel::<f32>::init(c, c, m, true, &mut rng);
        let t = time_median(cfg.warmup, cfg.iterations, || {
            std::hint::black_box(spatial_forward(&x, &k, 1).expect("valid shapes"));
        });
        push("spatial_full", n, m, t);
        let bank = bank_of_kernel(&k, n);
        let t = time_median(cfg.warmup, cfg.iterations, || {
            std::hint::black_box(depthwise_forward(&plan, &x, &bank, false).expect("valid shapes"));
        });
        push("frequency_full", n, m, t);
    }

    let mut slopes = Vec::new();
    for op in ["spatial", "frequency"] {
        for &m in &cfg.m_list {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.op == op && r.m == m)
                .map(|r| (r.n as f64, r.median_ns))
                .collect();
            if let Some(s) = loglog_slope(&pts) {
                slopes.push(Slope {
                    op: op.into(),
                    along: "N",
                    fixed: m,
                    slope: s,
                });
            }
        }
        for &n in &ns {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.op == op && r.n == n)
                .map(|r| (r.m as f64, r.median_ns))
                .collect();
            if let Some(s) = loglog_slope(&pts) {
                slopes.push(Slope {
                    op: op.into(),
                    along: "M",
                    fixed: n,
                    slope: s,
                });
            }
        }
    }

    let time_of = |op: &str, n: usize| rows.iter().find(|r| r.op == op && r.n == n).map(|r| r.median_ns);
    let mut crossover = None;
    for &n in ns.iter().rev().filter(|&&n| n <= cfg.full_max_n) {
        match (time_of("frequency_full", n), time_of("spatial_full", n)) {
            (Some(f), Some(s)) if f < s => crossover = Some(n),
            _ => break,
        }
    }
    Ok(BenchReport {
        rows,
        slopes,
        crossover,
    })
}

/// Timings of the paired-model epoch comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOverhead {
    pub spatial_seconds: Vec<f64>,
    pub niff_seconds: Vec<f64>,
    /// Second, independently built baseline.
    pub spatial_repeat_seconds: Vec<f64>,
    pub ratio: f64,
    pub self_ratio: f64,
    /// Eval pass over the slice with banks reused vs re-synthesized per batch.
    pub cached_eval_seconds: f64,
    pub uncached_eval_seconds: f64,
    pub rows: Vec<BenchRow>,
}

fn epoch_times(cfg: &RunConfig, data: &Dataset<f32>, variant: Variant, epochs: usize) -> Result<(Vec<f64>, Trainer<f32>)> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.variant = variant;
    let spec = model_cfg.spec((data.channels, data.height, data.width), CLASSES);
    let mut train_cfg = cfg.train.clone();
    train_cfg.epochs = epochs;
    let mut trainer = Trainer::<f32>::new(&spec, &train_cfg)?;
    let aug = cfg.data.augment();
    let mut times = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let t = Instant::now();
        trainer.train_epoch(data, &aug)?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok((times, trainer))
}

/// NIFF/baseline epoch-time ratio on identical topologies. The two
/// baseline runs are interleaved around the NIFF run so slow drifts in
/// machine speed affect both sides.
pub fn epoch_overhead(cfg: &RunConfig, data: &LoadedData<f32>) -> Result<EpochOverhead> {
    let epochs = cfg.bench.epochs.max(1);
    let slice = &data.train;
    let (spatial, _) = epoch_times(cfg, slice, Variant::Spatial, epochs)?;
    let (niff, mut trainer) = epoch_times(cfg, slice, Variant::Niff, epochs)?;
    let (repeat, _) = epoch_times(cfg, slice, Variant::Spatial, epochs)?;
    let sum = |v: &[f64]| v.iter().sum::<f64>();
    let base = 0.5 * (sum(&spatial) + sum(&repeat));

    let mut eval_time = |cache: bool| -> Result<f64> {
        trainer.model.set_bank_caching(cache);
        let t = Instant::now();
        evaluate(&mut trainer.model, &data.test, 64)?;
        Ok(t.elapsed().as_secs_f64())
    };
    // warm both paths once
    eval_time(true)?;
    eval_time(false)?;
    let cached = eval_time(true)?;
    let uncached = eval_time(false)?;

    let (n, m, c, b) = (
        slice.height,
        match cfg.model.kernel {
            crate::model::KernelSize::Fixed(m) => m,
            crate::model::KernelSize::FullResolution => full_kernel_side(slice.height),
        },
        cfg.model.channels.first().copied().unwrap_or(0),
        cfg.train.batch_size,
    );
    let row = |op: &str, secs: &[f64]| BenchRow {
        op: op.into(),
        n,
        m,
        c,
        b,
        median_ns: median(secs.to_vec()) * 1e9,
        iterations: secs.len(),
    };
    Ok(EpochOverhead {
        rows: vec![
            row("epoch_spatial", &spatial),
            row("epoch_niff", &niff),
            row("epoch_spatial_repeat", &repeat),
            row("eval_niff_cached", &[cached]),
            row("eval_niff_uncached", &[uncached]),
        ],
        ratio: sum(&niff) / base,
        self_ratio: sum(&repeat) / sum(&spatial),
        spatial_seconds: spatial,
        niff_seconds: niff,
        spatial_repeat_seconds: repeat,
        cached_eval_seconds: cached,
        uncached_eval_seconds: uncached,
    })
}

/// Runs `f` on a single worker unless `parallel` is set.
pub fn with_workers<R: Send>(parallel: bool, f: impl FnOnce() -> R + Send) -> Result<R> {
    if parallel {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| NiffError::invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn rows_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn write_pair(path: &Path, rows: &[BenchRow], fit: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, rows_csv(rows))?;
    fs::write(path.with_extension("fit.csv"), fit)?;
    Ok(())
}

/// Writes the rows to `path` and slopes plus crossover next to it
/// (`<stem>.fit.csv`).
pub fn write_report(path: &Path, report: &BenchReport) -> Result<()> {
    write_pair(path, &report.rows, &report.fit_csv())
}

impl EpochOverhead {
    pub fn fit_csv(&self) -> String {
        format!(
            "metric,value\nratio,{:.4}\nself_ratio,{:.4}\ncached_eval_seconds,{:.4}\nuncached_eval_seconds,{:.4}\n",
            self.ratio, self.self_ratio, self.cached_eval_seconds, self.uncached_eval_seconds
        )
    }
}

pub fn write_epoch_report(path: &Path, report: &EpochOverhead) -> Result<()> {
    write_pair(path, &report.rows, &report.fit_csv())
}

/// Loads `bench.train_samples` training samples (and as many test samples)
/// and runs [`epoch_overhead`] in single precision.
pub fn epoch_suite(cfg: &RunConfig) -> Result<EpochOverhead> {
    let mut cfg = cfg.clone();
    if cfg.bench.train_samples > 0 {
        cfg.data.train_limit = cfg.bench.train_samples;
        cfg.data.test_limit = cfg.bench.train_samples;
    }
    let data = load_data::<f32>(&cfg)?;
    with_workers(cfg.bench.parallel, || epoch_overhead(&cfg, &data))?
}
