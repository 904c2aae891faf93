//! Principal components of a kernel bank via a one-sided Jacobi SVD of the
//! mean-centered sample matrix.

use crate::error::{NiffError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaReport<T> {
    /// Feature dimension of each component.
    pub dim: usize,
    /// Unit-norm principal directions, strongest first, each of length `dim`.
    pub components: Vec<Vec<T>>,
    /// Singular values of the centered data, matching `components`.
    pub singular_values: Vec<T>,
    /// `sigma_i^2 / sum_j sigma_j^2`, descending.
    pub explained_variance_ratio: Vec<T>,
    pub mean: Vec<T>,
    /// Number of non-negligible singular values.
    pub rank: usize,
}

impl<T: Scalar> PcaReport<T> {
    /// `true` when every sample equals the mean.
    pub fn is_mean_only(&self) -> bool {
        self.rank == 0
    }
}

/// PCA of `n` samples of dimension `d`, stored row-major in `data`.
///
/// Keeps at most `max_components` directions (all when `None`). A bank whose
/// samples are all identical reports rank 0 with a single unit-ratio
/// component along the first axis.
pub fn pca<T: Scalar>(
    data: &[T],
    n: usize,
    d: usize,
    max_components: Option<usize>,
) -> Result<PcaReport<T>> {
    if n == 0 || d == 0 {
        return Err(NiffError::invalid("PCA needs at least one sample and one feature"));
    }
    if data.len() != n * d {
        return Err(NiffError::shape(format!(
            "PCA input has {} values, expected {n} x {d}",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(NiffError::NonFinite("PCA input".into()));
    }

    let mut mean = vec![T::zero(); d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v;
        }
    }
    let inv_n = T::one() / T::of_usize(n);
    mean.iter_mut().for_each(|m| *m *= inv_n);

    // Columns of `cols` are the centered samples (d-vectors). Orthogonalizing
    // them with plane rotations leaves U * Sigma, the left factor of the
    // transposed data, which is what the right singular vectors of the
    // sample matrix are.
    let mut cols: Vec<Vec<T>> = data
        .chunks(d)
        .map(|row| row.iter().zip(&mean).map(|(v, m)| *v - *m).collect())
        .collect();
    jacobi_orthogonalize(&mut cols);

    let mut pairs: Vec<(T, Vec<T>)> = cols
        .into_iter()
        .map(|c| {
            let norm = c.iter().map(|v| *v * *v).sum::<T>().sqrt();
            (norm, c)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite norms"));

    let top = pairs.first().map_or(T::zero(), |p| p.0);
    let scale = data.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::one());
    let tol = T::epsilon() * T::of_usize(n.max(d)) * scale * T::of(16.0);
    let rank = pairs.iter().filter(|p| p.0 > tol && p.0 > top * T::epsilon()).count();

    if rank == 0 {
        let mut axis = vec![T::zero(); d];
        axis[0] = T::one();
        return Ok(PcaReport {
            dim: d,
            components: vec![axis],
            singular_values: vec![T::zero()],
            explained_variance_ratio: vec![T::one()],
            mean,
            rank: 0,
        });
    }

    let keep = max_components.map_or(rank, |k| k.min(rank).max(1));
    let total: T = pairs[..rank].iter().map(|p| p.0 * p.0).sum();
    let mut components = Vec::with_capacity(keep);
    let mut singular_values = Vec::with_capacity(keep);
    let mut ratios = Vec::with_capacity(keep);
    for (sigma, col) in pairs.into_iter().take(keep) {
        components.push(col.iter().map(|v| *v / sigma).collect());
        ratios.push(sigma * sigma / total);
        singular_values.push(sigma);
    }
    Ok(PcaReport {
        dim: d,
        components,
        singular_values,
        explained_variance_ratio: ratios,
        mean,
        rank,
    })
}

/// One-sided Jacobi: rotates pairs of vectors until all are mutually
/// orthogonal.
fn jacobi_orthogonalize<T: Scalar>(cols: &mut [Vec<T>]) {
    let k = cols.len();
    let eps = T::epsilon();
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..k {
            for j in i + 1..k {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[i], &cols[j]);
                    let mut alpha = T::zero();
                    let mut beta = T::zero();
                    let mut gamma = T::zero();
                    for (x, y) in a.iter().zip(b) {
                        alpha += *x * *x;
                        beta += *y * *y;
                        gamma += *x * *y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(j);
                let (a, b) = (&mut left[i], &mut right[0]);
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }
}
