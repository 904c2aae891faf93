mod common;

use common::*;
use nalgebra::{DMatrix, SymmetricEigen};
use niff::analysis::*;
use niff::model::{ConvKind, LayerBank};
use niff::pca::pca;
use niff::synthesis::SpectralFilterBank;
use proptest::prelude::*;
use rand::Rng;

/// Explained-variance ratios from the eigenvalues of the sample covariance.
fn covariance_ratios(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let x = DMatrix::from_row_slice(n, d, data);
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = ev.iter().sum();
    ev.iter().map(|v| v / total).collect()
}

#[test]
fn pca_ratios_match_covariance_eigenvalues() {
    let mut r = rng(11);
    for (n, d) in [(20, 9), (50, 9), (12, 25), (64, 49), (8, 3)] {
        let data: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let rep = pca(&data, n, d, None).unwrap();
        let want = covariance_ratios(&data, n, d);
        let k = rep.rank;
        assert_eq!(k, d.min(n - 1));
        for i in 0..k {
            assert!(
                (rep.explained_variance_ratio[i] - want[i]).abs() < 1e-10,
                "{n}x{d} component {i}: {} vs {}",
                rep.explained_variance_ratio[i],
                want[i]
            );
        }
        let sum: f64 = rep.explained_variance_ratio.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for w in rep.explained_variance_ratio.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }
}

#[test]
fn pca_of_kernel_banks_against_oracle() {
    let mut r = rng(12);
    for (c, h, w) in [(16, 5, 5), (24, 7, 6), (40, 8, 8)] {
        let bank = random_bank(c, h, w, &mut r);
        let kb = extract_spatial_kernels(&bank);
        let rep = pca(&kb.kernels, c, h * w, None).unwrap();
        let want = covariance_ratios(&kb.kernels, c, h * w);
        for i in 0..rep.rank {
            assert!((rep.explained_variance_ratio[i] - want[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn extraction_inverts_a_known_spectrum() {
    let mut r = rng(13);
    for (h, w) in [(5, 5), (6, 8), (7, 4), (16, 16)] {
        let kernels: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..h * w).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let bank = bank_of_kernels(&kernels, h, w);
        let kb = extract_spatial_kernels(&bank);
        for (c, k) in kernels.iter().enumerate() {
            // extracted kernels are centered: origin tap at (h/2, w/2)
            for y in 0..h {
                for x in 0..w {
                    let want = k[((y + h - h / 2) % h) * w + (x + w - w / 2) % w];
                    assert!((kb.kernel(c)[y * w + x] - want).abs() < 1e-10);
                }
            }
            assert!(kb.imag_residue[c] < 1e-10);
        }
        // agrees with the naive inverse DFT path
        for c in 0..3 {
            let naive = kernel_of(&bank, c);
            for y in 0..h {
                for x in 0..w {
                    let v = naive[((y + h - h / 2) % h) * w + (x + w - w / 2) % w];
                    assert!((kb.kernel(c)[y * w + x] - v).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn non_hermitian_bank_reports_imaginary_residue() {
    let mut r = rng(14);
    let bank = random_bank(4, 8, 8, &mut r);
    let kb = extract_spatial_kernels(&bank);
    assert!(kb.imag_residue.iter().all(|v| *v > 1e-3));
}

/// Spectrum bank planting a random 3x3 kernel (magnitudes in [0.5, 1]) at the
/// origin of each channel.
fn planted_bank(c: usize, n: usize, r: &mut impl Rng) -> SpectralFilterBank<f64> {
    let kernels: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let mut k = vec![0.0; n * n];
            for dy in [n - 1, 0, 1] {
                for dx in [n - 1, 0, 1] {
                    let s = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                    k[(dy % n) * n + dx % n] = s * r.gen_range(0.5..1.0);
                }
            }
            k
        })
        .collect();
    bank_of_kernels(&kernels, n, n)
}

#[test]
fn planted_three_by_three_kernels_are_recovered() {
    let mut r = rng(15);
    let dir = tempfile::tempdir().unwrap();
    let banks: Vec<LayerBank<f64>> = [28usize, 14, 7, 8]
        .iter()
        .enumerate()
        .map(|(i, &n)| LayerBank {
            name: format!("layer{i}"),
            kind: ConvKind::NiffDepthwise,
            bank: planted_bank(6, n, &mut r),
        })
        .collect();
    let rep = analyze_banks(&banks, &AnalysisOptions::default(), dir.path()).unwrap();
    for l in &rep.layers {
        assert_eq!(l.effective_sizes, vec![3; 6], "{}", l.name);
        assert_eq!(l.mean_effective_size, 3.0);
        assert!(l.max_imag_residue < 1e-10);
    }
    assert_eq!(rep.frac_below_map(), 1.0);
    for f in ["mass_ratio.csv", "pca.csv", "summary.csv", "layer0_kernels.pgm", "layer0_pca_spatial.pgm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn full_window_of_odd_and_even_maps_is_one() {
    let mut r = rng(16);
    for n in [5, 6, 7, 8] {
        let k: Vec<f64> = (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let v = mass_ratio(&k, n, n, n, MassMode::Abs).unwrap();
        assert_eq!(v, 1.0);
    }
}

#[test]
fn mass_ratio_rejects_bad_windows() {
    let k = vec![1.0; 25];
    assert!(mass_ratio(&k, 5, 5, 0, MassMode::Abs).is_err());
    assert!(mass_ratio(&k, 5, 5, 6, MassMode::Abs).is_err());
    assert!(mass_ratio(&k[..24], 5, 5, 3, MassMode::Abs).is_err());
}

#[test]
fn thousand_random_kernels_are_monotone_ending_at_one() {
    let mut r = rng(17);
    for i in 0..1000 {
        let n = [5, 6, 7, 8, 9, 16][i % 6];
        let k: Vec<f64> = (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut prev = 0.0;
        for s in 1..=n {
            let v = mass_ratio(&k, n, n, s, MassMode::Abs).unwrap();
            assert!(v >= prev - 1e-15, "kernel {i} window {s}");
            prev = v;
        }
        assert_eq!(prev, 1.0);
    }
}

proptest! {
    #[test]
    fn mass_ratio_bounded_and_monotone(n in 3usize..12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let k: Vec<f64> = (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let curve: Vec<f64> = (1..=n).map(|s| mass_ratio(&k, n, n, s, MassMode::Abs).unwrap()).collect();
        for w in curve.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-15);
        }
        prop_assert!(curve.iter().all(|v| (0.0..=1.0 + 1e-15).contains(v)));
        let eff = effective_kernel_size(&k, n, n, 0.95, MassMode::Abs).unwrap();
        prop_assert!(curve[eff - 1] >= 0.95);
        if eff > 1 {
            prop_assert!(curve[eff - 2] < 0.95);
        }
    }

    #[test]
    fn pca_ratios_sum_to_one(n in 2usize..20, d in 1usize..12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let rep = pca(&data, n, d, None).unwrap();
        let sum: f64 = rep.explained_variance_ratio.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-10);
        for c in &rep.components {
            let norm: f64 = c.iter().map(|v| v * v).sum();
            prop_assert!((norm - 1.0).abs() < 1e-10);
        }
    }
}
