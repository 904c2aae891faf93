//! Acceptance suite: one PASS/FAIL line per criterion. Training artifacts go
//! to the cargo target tmpdir so they can be inspected afterwards.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use nalgebra::{DMatrix, SymmetricEigen};
use niff::analysis::{analyze_banks, extract_spatial_kernels, mass_ratio, AnalysisOptions, MassMode};
use niff::bench::{epoch_overhead, sweep_conv, with_workers};
use niff::checkpoint::Checkpoint;
use niff::config::{BenchConfig, RunConfig};
use niff::conv::*;
use niff::model::{ArchOptions, BlockStyle, FullImpl, KernelSize, LayerBank, Model, ModelSpec, Variant};
use niff::param::Parameterized;
use niff::pca::pca;
use niff::run::{load_data, model_from_checkpoint, train_on, LoadedData, CHECKPOINT_FILE, METRICS_FILE};
use niff::spectral::Fft2;
use niff::synthesis::{Activation, MlpGrads, NiffMlp, Preset};
use niff::train::cross_entropy;
use niff::{FeatureMap, Shape4};
use rand::Rng;

type Outcome = std::result::Result<String, String>;

const EPS: f64 = 1e-5;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn data_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k")
}

fn artifacts() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------
// 1

fn convolution_theorem() -> Outcome {
    let t = Instant::now();
    let mut r = rng(101);
    let sides = [5, 6, 7, 8, 16];
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (h, w) = (sides[r.gen_range(0..5)], sides[r.gen_range(0..5)]);
        let (b, c) = (r.gen_range(1..3), r.gen_range(1..4));
        let x = random_map(Shape4::new(b, c, h, w), &mut r);
        let plan = Fft2::new(h, w);

        let bank = random_bank(c, h, w, &mut r);
        let y = depthwise_forward(&plan, &x, &bank, false).map_err(|e| e.to_string())?.0.output;
        worst = worst.max(y.max_abs_diff(&depthwise_oracle(&x, &bank)));

        let c_out = r.gen_range(1..4);
        let bank = random_bank(c * c_out, h, w, &mut r);
        let y = full_forward(&plan, &x, &bank, c_out, false).map_err(|e| e.to_string())?.0.output;
        worst = worst.max(y.max_abs_diff(&full_oracle(&x, &bank, c_out)));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(worst < 1e-10, || format!("max abs error {worst:.3e}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("200 pairs, max abs error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 2

struct Checker {
    worst: f64,
    coords: usize,
}

impl Checker {
    fn check(&mut self, op: &str, fd: f64, an: f64) -> std::result::Result<(), String> {
        let e = rel_err(fd, an);
        self.worst = self.worst.max(e);
        self.coords += 1;
        ensure(e < 1e-4, || format!("{op}: numeric {fd} vs analytic {an} (rel {e:.2e})"))
    }
}

/// Flat view of an MLP's parameters: every layer's weights, then its biases.
fn mlp_slots(mlp: &NiffMlp<f64>) -> Vec<(usize, bool, usize)> {
    let mut out = Vec::new();
    for (l, layer) in mlp.layers().iter().enumerate() {
        out.extend((0..layer.weight.len()).map(|i| (l, false, i)));
        out.extend((0..layer.bias.len()).map(|i| (l, true, i)));
    }
    out
}

fn bump_mlp(mlp: &NiffMlp<f64>, slot: (usize, bool, usize), d: f64) -> NiffMlp<f64> {
    let mut m = mlp.clone();
    let layer = &mut m.layers_mut()[slot.0];
    if slot.1 {
        layer.bias.value[slot.2] += d;
    } else {
        layer.weight.value[slot.2] += d;
    }
    m
}

fn mlp_grad(g: &MlpGrads<f64>, slot: (usize, bool, usize)) -> f64 {
    if slot.1 {
        g.biases[slot.0][slot.2]
    } else {
        g.weights[slot.0][slot.2]
    }
}

fn bump_map(x: &FeatureMap<f64>, i: usize, d: f64) -> FeatureMap<f64> {
    let mut y = x.clone();
    y.data_mut()[i] += d;
    y
}

fn niff_op_gradients(preset: Preset, act: Activation, seed: u64, ck: &mut Checker) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let s = Shape4::new(2, 3, 6, 5);
    let x = random_map(s, &mut r);
    let e = |e: niff::NiffError| e.to_string();

    let mlp = random_mlp(preset, 3, act, &mut r);
    let proj = projection(s, seed + 1);
    let f = |x: &FeatureMap<f64>, m: &NiffMlp<f64>| dot(&niff_depthwise(x, m).unwrap(), &proj);
    let (gx, gm) = niff_depthwise_backward(&x, &mlp, &proj).map_err(e)?;
    for i in sample_indices(s.len(), 20, &mut r) {
        ck.check("niff_depthwise x", (f(&bump_map(&x, i, EPS), &mlp) - f(&bump_map(&x, i, -EPS), &mlp)) / (2.0 * EPS), gx.data()[i])?;
    }
    let slots = mlp_slots(&mlp);
    for k in sample_indices(slots.len(), 30, &mut r) {
        let sl = slots[k];
        let fd = (f(&x, &bump_mlp(&mlp, sl, EPS)) - f(&x, &bump_mlp(&mlp, sl, -EPS))) / (2.0 * EPS);
        ck.check("niff_depthwise mlp", fd, mlp_grad(&gm, sl))?;
    }

    let c_out = 2;
    let mlp = random_mlp(preset, 3 * c_out, act, &mut r);
    let proj = projection(s.with_channels(c_out), seed + 2);
    let f = |x: &FeatureMap<f64>, m: &NiffMlp<f64>| dot(&niff_full(x, m).unwrap(), &proj);
    let (gx, gm) = niff_full_backward(&x, &mlp, &proj).map_err(e)?;
    for i in sample_indices(s.len(), 20, &mut r) {
        ck.check("niff_full x", (f(&bump_map(&x, i, EPS), &mlp) - f(&bump_map(&x, i, -EPS), &mlp)) / (2.0 * EPS), gx.data()[i])?;
    }
    let slots = mlp_slots(&mlp);
    for k in sample_indices(slots.len(), 30, &mut r) {
        let sl = slots[k];
        let fd = (f(&x, &bump_mlp(&mlp, sl, EPS)) - f(&x, &bump_mlp(&mlp, sl, -EPS))) / (2.0 * EPS);
        ck.check("niff_full mlp", fd, mlp_grad(&gm, sl))?;
    }

    let mlp = random_mlp(preset, 3, act, &mut r);
    let mix = random_mix(4, 3, true, &mut r);
    let proj = projection(s.with_channels(4), seed + 3);
    let f = |x: &FeatureMap<f64>, m: &NiffMlp<f64>, mix: &ChannelMix<f64>| dot(&niff_decomposed(x, m, mix).unwrap(), &proj);
    let (gx, gm, gmix) = niff_decomposed_backward(&x, &mlp, &mix, &proj).map_err(e)?;
    for i in sample_indices(s.len(), 15, &mut r) {
        let fd = (f(&bump_map(&x, i, EPS), &mlp, &mix) - f(&bump_map(&x, i, -EPS), &mlp, &mix)) / (2.0 * EPS);
        ck.check("niff_decomposed x", fd, gx.data()[i])?;
    }
    let slots = mlp_slots(&mlp);
    for k in sample_indices(slots.len(), 25, &mut r) {
        let sl = slots[k];
        let fd = (f(&x, &bump_mlp(&mlp, sl, EPS), &mix) - f(&x, &bump_mlp(&mlp, sl, -EPS), &mix)) / (2.0 * EPS);
        ck.check("niff_decomposed mlp", fd, mlp_grad(&gm, sl))?;
    }
    for k in 0..12 {
        let (mut a, mut b) = (mix.clone(), mix.clone());
        a.weight.value[k] += EPS;
        b.weight.value[k] -= EPS;
        ck.check("niff_decomposed mix", (f(&x, &mlp, &a) - f(&x, &mlp, &b)) / (2.0 * EPS), gmix.weight[k])?;
    }
    Ok(())
}

fn spatial_and_pointwise_gradients(ck: &mut Checker) -> std::result::Result<(), String> {
    let mut r = rng(220);
    let s = Shape4::new(2, 3, 7, 6);
    let x = random_map(s, &mut r);

    let mix = random_mix(4, 3, true, &mut r);
    let proj = projection(s.with_channels(4), 221);
    let f = |x: &FeatureMap<f64>, m: &ChannelMix<f64>| dot(&freq_pointwise(x, m).unwrap(), &proj);
    let (gx, gm) = freq_pointwise_backward(&x, &mix, &proj).map_err(|e| e.to_string())?;
    for i in sample_indices(s.len(), 34, &mut r) {
        ck.check("freq_pointwise x", (f(&bump_map(&x, i, EPS), &mix) - f(&bump_map(&x, i, -EPS), &mix)) / (2.0 * EPS), gx.data()[i])?;
    }
    for k in 0..12 {
        let (mut a, mut b) = (mix.clone(), mix.clone());
        a.weight.value[k] += EPS;
        b.weight.value[k] -= EPS;
        ck.check("freq_pointwise w", (f(&x, &a) - f(&x, &b)) / (2.0 * EPS), gm.weight[k])?;
    }
    for k in 0..4 {
        let (mut a, mut b) = (mix.clone(), mix.clone());
        a.bias.as_mut().unwrap().value[k] += EPS;
        b.bias.as_mut().unwrap().value[k] -= EPS;
        ck.check("freq_pointwise bias", (f(&x, &a) - f(&x, &b)) / (2.0 * EPS), gm.bias.as_ref().unwrap()[k])?;
    }

    for (stride, depthwise, c_out, m) in [(1, false, 4, 3), (1, true, 3, 5), (2, false, 4, 3), (2, true, 3, 3)] {
        let k = SpatialKernel::init(c_out, 3, m, depthwise, &mut r);
        let out = spatial_forward(&x, &k, stride).map_err(|e| e.to_string())?;
        let proj = projection(out.shape(), 222);
        let f = |x: &FeatureMap<f64>, k: &SpatialKernel<f64>| dot(&spatial_forward(x, k, stride).unwrap(), &proj);
        let (gx, gk) = spatial_backward(&x, &k, stride, &proj).map_err(|e| e.to_string())?;
        let op = format!("spatial s{stride} m{m}{}", if depthwise { " depthwise" } else { "" });
        for i in sample_indices(s.len(), 25, &mut r) {
            ck.check(&op, (f(&bump_map(&x, i, EPS), &k) - f(&bump_map(&x, i, -EPS), &k)) / (2.0 * EPS), gx.data()[i])?;
        }
        for i in sample_indices(k.weight.len(), 25, &mut r) {
            let (mut a, mut b) = (k.clone(), k.clone());
            a.weight.value[i] += EPS;
            b.weight.value[i] -= EPS;
            ck.check(&op, (f(&x, &a) - f(&x, &b)) / (2.0 * EPS), gk[i])?;
        }
    }

    let logits: Vec<f64> = (0..5 * 10).map(|_| r.gen_range(-3.0..3.0)).collect();
    let labels: Vec<u8> = (0..5).map(|_| r.gen_range(0..10)).collect();
    let (_, g, _) = cross_entropy(&logits, &labels, 10, 0.1);
    for i in 0..50 {
        let (mut a, mut b) = (logits.clone(), logits.clone());
        a[i] += EPS;
        b[i] -= EPS;
        let fd = (cross_entropy(&a, &labels, 10, 0.1).0 - cross_entropy(&b, &labels, 10, 0.1).0) / (2.0 * EPS);
        ck.check("cross_entropy", fd, g[i])?;
    }
    Ok(())
}

/// Whole model (batch norm, ReLU, residual sums, head) in training mode.
fn model_gradients(ck: &mut Checker) -> std::result::Result<(), String> {
    for (variant, fi, seed) in [(Variant::Niff, FullImpl::Decomposed, 230), (Variant::Spatial, FullImpl::Full, 231)] {
        let opts = ArchOptions {
            variant,
            block: BlockStyle::Full,
            full_impl: fi,
            // zero-initialized MLP biases sit on the ReLU kink at the grid origin
            mlp_activation: Activation::Silu,
            ..ArchOptions::default()
        };
        let spec = ModelSpec::resnet((2, 7, 6), &[3, 4], 5, &opts);
        let mut r = rng(seed);
        let mut model = Model::<f64>::build(&spec, &mut r).map_err(|e| e.to_string())?;
        let x = random_map(Shape4::new(3, 2, 7, 6), &mut r);
        let proj: Vec<f64> = (0..15).map(|_| r.gen_range(-1.0..1.0)).collect();
        let loss = |m: &mut Model<f64>| -> f64 {
            m.forward(&x, true).unwrap().iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        model.zero_grad();
        loss(&mut model);
        model.backward(&proj).map_err(|e| e.to_string())?;
        let mut coords: Vec<(String, usize, f64)> = Vec::new();
        model.visit_params("", &mut |name, p| {
            for i in [0, p.len() / 2, p.len() - 1] {
                coords.push((name.clone(), i, p.grad[i]));
            }
        });
        for (name, i, g) in &coords {
            let bump = |d: f64, m: &mut Model<f64>| {
                m.visit_params("", &mut |n, p| {
                    if &n == name {
                        p.value[*i] += d;
                    }
                });
                m.invalidate();
            };
            bump(EPS, &mut model);
            let lp = loss(&mut model);
            bump(-2.0 * EPS, &mut model);
            let lm = loss(&mut model);
            bump(EPS, &mut model);
            ck.check(&format!("model {name}"), (lp - lm) / (2.0 * EPS), *g)?;
        }
    }
    Ok(())
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut ck = Checker { worst: 0.0, coords: 0 };
    let mut seed = 200;
    for preset in Preset::ALL {
        for act in [Activation::Relu, Activation::Silu, Activation::Gelu] {
            niff_op_gradients(preset, act, seed, &mut ck).map_err(|e| format!("{preset}/{act}: {e}"))?;
            seed += 10;
        }
    }
    spatial_and_pointwise_gradients(&mut ck)?;
    model_gradients(&mut ck)?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} coordinates, worst rel error {:.2e}", ck.coords, ck.worst))
}

// ---------------------------------------------------------------------------
// 3

fn pointwise_equivalence() -> Outcome {
    let mut r = rng(301);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, c_in, c_out) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5));
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        let x = random_map(Shape4::new(b, c_in, h, w), &mut r);
        let weights: Vec<f64> = (0..c_out * c_in).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mix = ChannelMix::new(c_out, c_in, weights.clone(), None).map_err(|e| e.to_string())?;
        let k = SpatialKernel::full(c_out, c_in, 1, weights).map_err(|e| e.to_string())?;
        let a = freq_pointwise(&x, &mix).map_err(|e| e.to_string())?;
        let s = spatial_forward(&x, &k, 1).map_err(|e| e.to_string())?;
        worst = worst.max(a.max_abs_diff(&s));
    }
    ensure(worst < 1e-10, || format!("max abs error {worst:.3e}"))?;
    Ok(format!("100 cases, max abs error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 4

fn kernel_mass_metric() -> Outcome {
    let mut r = rng(401);
    // plant 3x3 kernels into the banks of a NIFF model's layers
    let spec = ModelSpec::plain((1, 28, 28), &[8, 16, 16], 10, &ArchOptions::default());
    let model = Model::<f64>::build(&spec, &mut r).map_err(|e| e.to_string())?;
    let banks: Vec<LayerBank<f64>> = model
        .niff_banks()
        .into_iter()
        .map(|lb| {
            let (c, h, w) = (lb.bank.channels(), lb.bank.height(), lb.bank.width());
            let kernels: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    let mut k = vec![0.0; h * w];
                    for dy in [h - 1, 0, 1] {
                        for dx in [w - 1, 0, 1] {
                            let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                            k[(dy % h) * w + dx % w] = sign * r.gen_range(0.5..1.0);
                        }
                    }
                    k
                })
                .collect();
            LayerBank {
                bank: bank_of_kernels(&kernels, h, w),
                ..lb
            }
        })
        .collect();
    ensure(!banks.is_empty(), || "model has no NIFF layers".into())?;
    let out = artifacts().join("planted");
    let rep = analyze_banks(&banks, &AnalysisOptions::default(), &out).map_err(|e| e.to_string())?;
    let mut kernels = 0;
    for l in &rep.layers {
        ensure(l.effective_sizes.iter().all(|&s| s == 3), || {
            format!("{}: effective sizes {:?}", l.name, l.effective_sizes)
        })?;
        kernels += l.effective_sizes.len();
    }

    for i in 0..1000 {
        let n = [5, 6, 7, 8, 9, 16, 28][i % 7];
        let k: Vec<f64> = (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut prev = 0.0;
        for s in 1..=n {
            let v = mass_ratio(&k, n, n, s, MassMode::Abs).map_err(|e| e.to_string())?;
            ensure(v >= prev, || format!("random kernel {i}: ratio drops at window {s}"))?;
            prev = v;
        }
        ensure(prev == 1.0, || format!("random kernel {i}: terminal ratio {prev}"))?;
    }
    Ok(format!(
        "{kernels} planted kernels in {} layers all size 3; 1000 random curves monotone to 1",
        rep.layers.len()
    ))
}

// ---------------------------------------------------------------------------
// 5

fn pca_correctness() -> Outcome {
    let mut r = rng(501);
    let mut worst = 0.0f64;
    for (c, h, w) in [(20, 3, 3), (32, 5, 5), (64, 7, 7), (16, 6, 8), (100, 4, 4)] {
        let bank = random_bank(c, h, w, &mut r);
        let kb = extract_spatial_kernels(&bank);
        let d = h * w;
        let rep = pca(&kb.kernels, c, d, None).map_err(|e| e.to_string())?;

        let x = DMatrix::from_row_slice(c, d, &kb.kernels);
        let mean = x.row_mean();
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let cov = centered.transpose() * &centered / (c as f64 - 1.0);
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = ev.iter().sum();
        for (i, got) in rep.explained_variance_ratio.iter().enumerate() {
            worst = worst.max((got - ev[i] / total).abs());
        }
        ensure(rep.rank == d.min(c - 1), || format!("{c}x{d}: rank {}", rep.rank))?;
        let sum: f64 = rep.explained_variance_ratio.iter().sum();
        ensure((sum - 1.0).abs() < 1e-10, || format!("{c}x{d}: ratios sum to {sum}"))?;
    }
    ensure(worst < 1e-10, || format!("max ratio error {worst:.3e}"))?;
    Ok(format!("5 banks, max ratio error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 6

fn recipe() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.root = data_root();
    cfg.train.epochs = 10;
    cfg
}

struct Ctx {
    /// Trained NIFF checkpoint from the first seed.
    trained: Option<PathBuf>,
}

fn training_parity(ctx: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let base = recipe();
    let data: LoadedData<f32> = load_data(&base).map_err(|e| format!("{e} (run scripts/make_mnist5k.py)"))?;
    let mut niff = Vec::new();
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut accs = [0.0; 2];
        for (j, v) in [Variant::Spatial, Variant::Niff].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.model.variant = v;
            let out = artifacts().join(format!("mnist_seed{seed}_{}", if j == 0 { "spatial" } else { "niff" }));
            let rep = train_on(&cfg, &data, &out, None).map_err(|e| e.to_string())?;
            accs[j] = rep.final_test_acc().unwrap_or(0.0);
            if seed == 0 && v == Variant::Niff {
                ctx.trained = Some(rep.checkpoint.clone());
            }
        }
        lines.push(format!("seed {seed}: spatial {:.4} niff {:.4}", accs[0], accs[1]));
        niff.push(accs[1]);
        gaps.push(100.0 * (accs[0] - accs[1]));
    }
    for l in &lines {
        println!("    {l}");
    }
    let secs = t.elapsed().as_secs_f64();
    let (acc, gap) = (median(niff), median(gaps));
    let summary = format!("median niff {:.2}%, median gap {gap:.2} points, {:.1} min", 100.0 * acc, secs / 60.0);
    ensure(acc >= 0.95, || format!("{summary}: below 95%"))?;
    ensure(gap <= 2.0, || format!("{summary}: gap above 2 points"))?;
    ensure(secs < 1800.0, || format!("{summary}: over 30 min"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 7

/// Parameters of `plain(input, [16, 32, 64], 10)` counted from its layout:
/// full stem, stride-2 3x3 downsamples, then depthwise + 1x1 per stage, each
/// conv followed by batch norm, and a linear head.
fn expected_params(variant: Variant, side: usize) -> usize {
    let odd = |n: usize| if n % 2 == 0 { n - 1 } else { n };
    let mlp = |c: usize| (2 * 32 + 32) + (32 * 2 * c + 2 * c);
    let bn = |c: usize| 2 * c;
    let (c0, c1, c2) = (16, 32, 64);
    let (s0, s1, s2) = (side, side.div_ceil(2), side.div_ceil(4));
    let down = |c: usize| c * c * 9 + bn(c);
    let head = c2 * 10 + 10;
    match variant {
        Variant::Spatial => {
            let stem = c0 * odd(s0).pow(2) + bn(c0);
            let stage1 = c0 * odd(s1).pow(2) + bn(c0) + c0 * c1 + bn(c1);
            let stage2 = c1 * odd(s2).pow(2) + bn(c1) + c1 * c2 + bn(c2);
            stem + down(c0) + stage1 + down(c1) + stage2 + head
        }
        Variant::Niff => {
            let stem = mlp(c0) + bn(c0);
            let stage1 = mlp(c0) + bn(c0) + c0 * c1 + bn(c1);
            let stage2 = mlp(c1) + bn(c1) + c1 * c2 + bn(c2);
            stem + down(c0) + stage1 + down(c1) + stage2 + head
        }
    }
}

fn parameter_invariance() -> Outcome {
    let mut counts = Vec::new();
    for variant in [Variant::Niff, Variant::Spatial] {
        for side in [28, 56] {
            let opts = ArchOptions {
                variant,
                kernel: KernelSize::FullResolution,
                ..ArchOptions::default()
            };
            let spec = ModelSpec::plain((1, side, side), &[16, 32, 64], 10, &opts);
            let mut model = Model::<f32>::build(&spec, &mut rng(7)).map_err(|e| e.to_string())?;
            let got = model.param_count();
            let want = expected_params(variant, side);
            ensure(got == want, || format!("{variant:?} at {side}: {got} params, construction gives {want}"))?;
            counts.push(got);
        }
    }
    ensure(counts[0] == counts[1], || format!("niff {} vs {}", counts[0], counts[1]))?;
    // spatial kernel taps scale with the map area
    ensure(counts[3] > counts[2], || "spatial count did not grow".into())?;
    let taps = |side: usize| -> usize {
        let odd = |n: usize| if n % 2 == 0 { n - 1 } else { n };
        16 * odd(side).pow(2) + 16 * odd(side.div_ceil(2)).pow(2) + 32 * odd(side.div_ceil(4)).pow(2)
    };
    ensure(counts[3] - counts[2] == taps(56) - taps(28), || "growth is not the kernel-tap difference".into())?;
    Ok(format!(
        "niff {} at 28 and 56; spatial full-size {} -> {} ({:.2}x)",
        counts[0],
        counts[2],
        counts[3],
        counts[3] as f64 / counts[2] as f64
    ))
}

// ---------------------------------------------------------------------------
// 8

fn locality(ctx: &Ctx) -> Outcome {
    let path = ctx.trained.clone().ok_or("no trained NIFF checkpoint (training criterion did not run)")?;
    let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let (model, _) = model_from_checkpoint::<f32>(&ckpt).map_err(|e| e.to_string())?;
    let out = artifacts().join("mnist_analysis");
    let rep = analyze_banks(&model.niff_banks(), &AnalysisOptions::default(), &out).map_err(|e| e.to_string())?;
    for l in &rep.layers {
        println!(
            "    {} ({}, {}x{}, {} kernels): mean effective size {:.2}",
            l.name, l.kind, l.height, l.width, l.kernels, l.mean_effective_size
        );
    }
    let frac = rep.frac_below_map();
    ensure(out.join("summary.csv").exists(), || "no summary written".into())?;
    ensure(frac >= 0.9, || format!("only {:.1}% of kernels smaller than their map", 100.0 * frac))?;
    Ok(format!("{:.1}% of kernels smaller than their map, report in {}", 100.0 * frac, out.display()))
}

// ---------------------------------------------------------------------------
// 9

fn runtime_overhead() -> Outcome {
    let mut cfg = recipe();
    cfg.bench = BenchConfig::default();
    let sweep = with_workers(false, || sweep_conv(&cfg.bench)).map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
    niff::bench::write_report(&artifacts().join("bench.csv"), &sweep).map_err(|e| e.to_string())?;
    let spatial: Vec<f64> = cfg.bench.m_list.iter().filter_map(|&m| sweep.slope("spatial", "N", m)).collect();
    let freq: Vec<f64> = cfg.bench.n_list.iter().filter_map(|&n| sweep.slope("frequency", "M", n)).collect();
    ensure(!spatial.is_empty() && !freq.is_empty(), || "sweep produced no slopes".into())?;

    let mut slice_cfg = cfg.clone();
    slice_cfg.data.train_limit = cfg.bench.train_samples;
    slice_cfg.data.test_limit = cfg.bench.train_samples;
    let data: LoadedData<f32> = load_data(&slice_cfg).map_err(|e| e.to_string())?;
    let ov = with_workers(false, || epoch_overhead(&slice_cfg, &data)).map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;

    let fmt = |v: &[f64]| v.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join(" ");
    let summary = format!(
        "epoch ratio {:.2} (self {:.2}); spatial N-slopes [{}]; frequency M-slopes [{}]; crossover N* {}",
        ov.ratio,
        ov.self_ratio,
        fmt(&spatial),
        fmt(&freq),
        sweep.crossover.map_or("none".into(), |n| n.to_string())
    );
    ensure((1.2..=4.0).contains(&ov.ratio), || format!("{summary}: ratio outside [1.2, 4]"))?;
    ensure(spatial.iter().all(|s| (s - 2.0).abs() <= 0.3), || format!("{summary}: spatial slope off 2"))?;
    ensure(freq.iter().all(|s| s.abs() < 0.1), || format!("{summary}: frequency cost depends on M"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 10

fn determinism() -> Outcome {
    let mut cfg = recipe();
    cfg.data.train_limit = 400;
    cfg.data.test_limit = 200;
    cfg.train.epochs = 4;
    let data: LoadedData<f32> = load_data(&cfg).map_err(|e| e.to_string())?;
    let root = artifacts().join("determinism");
    let _ = fs::remove_dir_all(&root);
    let read = |p: &Path| fs::read(p).map_err(|e| e.to_string());
    for v in [Variant::Niff, Variant::Spatial] {
        cfg.model.variant = v;
        let dir = |s: &str| root.join(format!("{v:?}_{s}"));
        train_on(&cfg, &data, &dir("a"), None).map_err(|e| e.to_string())?;
        train_on(&cfg, &data, &dir("b"), None).map_err(|e| e.to_string())?;
        ensure(read(&dir("a").join(METRICS_FILE))? == read(&dir("b").join(METRICS_FILE))?, || {
            format!("{v:?}: reruns wrote different metrics")
        })?;

        let path = dir("a").join(CHECKPOINT_FILE);
        let bytes = read(&path)?;
        let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        ensure(ckpt.to_bytes() == bytes, || format!("{v:?}: load/save changes bytes"))?;
        let (mut model, meta) = model_from_checkpoint::<f32>(&ckpt).map_err(|e| e.to_string())?;
        let velocity = Default::default();
        let again = Checkpoint::capture(&mut model, &velocity, meta.to_map());
        for rec in &again.records {
            ensure(ckpt.record(&rec.name) == Some(rec), || format!("{v:?}: {} differs after reload", rec.name))?;
        }

        let mut first = cfg.clone();
        first.train.stop_after = 2;
        train_on(&first, &data, &dir("c"), None).map_err(|e| e.to_string())?;
        train_on(&cfg, &data, &dir("c"), Some(&dir("c").join(CHECKPOINT_FILE))).map_err(|e| e.to_string())?;
        for f in [METRICS_FILE, CHECKPOINT_FILE] {
            ensure(read(&dir("a").join(f))? == read(&dir("c").join(f))?, || {
                format!("{v:?}: resumed {f} differs from straight-through")
            })?;
        }
    }
    Ok("reruns, checkpoint round trip and resume at epoch 2 of 4 are bit-identical".into())
}

// ---------------------------------------------------------------------------

fn main() {
    fs::create_dir_all(artifacts()).expect("artifact directory");
    let mut ctx = Ctx { trained: None };
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut(&mut Ctx) -> Outcome, ctx: &mut Ctx| {
        let t = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(ctx)))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())))));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("[{n:>2}] PASS {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("[{n:>2}] FAIL {name}: {msg} ({secs:.1}s)");
            }
        }
    };
    report(1, "convolution theorem", &mut |_| convolution_theorem(), &mut ctx);
    report(2, "gradient suite", &mut |_| gradient_suite(), &mut ctx);
    report(3, "frequency 1x1 equals spatial 1x1", &mut |_| pointwise_equivalence(), &mut ctx);
    report(4, "kernel mass metric", &mut |_| kernel_mass_metric(), &mut ctx);
    report(5, "PCA correctness", &mut |_| pca_correctness(), &mut ctx);
    report(6, "MNIST-5k training parity", &mut training_parity, &mut ctx);
    report(7, "parameter count invariance", &mut |_| parameter_invariance(), &mut ctx);
    report(8, "locality of learned kernels", &mut |c| locality(c), &mut ctx);
    report(9, "runtime overhead", &mut |_| runtime_overhead(), &mut ctx);
    report(10, "determinism and persistence", &mut |_| determinism(), &mut ctx);
    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
