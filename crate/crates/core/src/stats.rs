//! Monte Carlo summary statistics: mean/standard-error estimates, paired
//! differences, sample moments, and an energy-distance two-sample test with a
//! permutation null.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream_rng, StreamDomain};

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    /// Distance from `target` in units of the standard error
    /// (`inf` when the estimate is exact and off-target).
    pub fn sigmas_from(&self, target: f64) -> f64 {
        let diff = (self.mean - target).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.stderr
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len();
    assert!(n > 1, "need at least two samples");
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Estimate { mean, stderr: (var / n as f64).sqrt(), n }
}

/// Estimate of `E[a - b]` from paired samples; the pairing keeps common noise
/// out of the standard error.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Estimate {
    assert_eq!(a.len(), b.len(), "paired samples must align");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_stderr(&diffs)
}

/// Sample mean vector and covariance matrix of `n` stacked `dim`-vectors.
pub fn sample_mean_cov(samples: &[f64], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len() / dim;
    assert!(n > 1 && samples.len() == n * dim);
    let mut mean = DVector::zeros(dim);
    for row in samples.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for row in samples.chunks_exact(dim) {
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for i in 0..dim {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    (mean, cov)
}

/// Result of the energy-distance permutation test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EnergyDistanceReport {
    /// Scaled statistic `n m / (n + m) * E(X, Y)`.
    pub statistic: f64,
    /// Permutation p-value `(1 + #{T_perm >= T_obs}) / (B + 1)`.
    pub p_value: f64,
    pub n_permutations: usize,
    pub n_x: usize,
    pub n_y: usize,
}

impl EnergyDistanceReport {
    /// Exact Monte Carlo test convention: reject when `p <= alpha`, which has
    /// level exactly `alpha` whenever `(B + 1) alpha` is an integer.
    pub fn rejects_at(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

/// Two-sample energy-distance test. `x` and `y` are row-major stacks of
/// `dim`-dimensional points. The null distribution comes from `n_permutations`
/// random relabelings of the pooled sample, so the test is distribution-free;
/// `n_permutations` bounds the p-value resolution from below by
/// `1 / (n_permutations + 1)`.
pub fn energy_distance_test(
    x: &[f64],
    y: &[f64],
    dim: usize,
    n_permutations: usize,
    seed: u64,
) -> Result<EnergyDistanceReport> {
    if dim == 0 || x.len() % dim != 0 || y.len() % dim != 0 {
        return Err(Error::InvalidSpec("sample arrays must be multiples of dim".into()));
    }
    let n = x.len() / dim;
    let m = y.len() / dim;
    if n < 2 || m < 2 {
        return Err(Error::InvalidSpec("energy distance needs at least 2 points per sample".into()));
    }

    let mut pooled = Vec::with_capacity(x.len() + y.len());
    pooled.extend_from_slice(x);
    pooled.extend_from_slice(y);

    // The total pair sum is invariant under relabeling, so each permutation
    // only has to revisit within-group pairs.
    let s_all = pair_sum(&pooled, dim);
    let t_obs = scaled_statistic(pair_sum(x, dim), pair_sum(y, dim), s_all, n, m);

    let total = n + m;
    let exceed: usize = par::map_indexed(n_permutations, |p| {
        let mut rng = stream_rng(seed, StreamDomain::Permutation, 0, p as u64);
        let mut idx: Vec<u32> = (0..total as u32).collect();
        // Fisher-Yates
        for i in (1..total).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            idx.swap(i, j);
        }
        let mut gx = Vec::with_capacity(n * dim);
        let mut gy = Vec::with_capacity(m * dim);
        for (k, &i) in idx.iter().enumerate() {
            let row = &pooled[i as usize * dim..(i as usize + 1) * dim];
            if k < n {
                gx.extend_from_slice(row);
            } else {
                gy.extend_from_slice(row);
            }
        }
        let t = scaled_statistic(pair_sum_serial(&gx, dim), pair_sum_serial(&gy, dim), s_all, n, m);
        usize::from(t >= t_obs)
    })
    .into_iter()
    .sum();

    let p_value = (1 + exceed) as f64 / (n_permutations + 1) as f64;
    Ok(EnergyDistanceReport {
        statistic: t_obs,
        p_value,
        n_permutations,
        n_x: n,
        n_y: m,
    })
}

/// `n m/(n+m) * [2 C/(n m) - 2 Wx/n^2 - 2 Wy/m^2]` with `C = S_all - Wx - Wy`.
fn scaled_statistic(wx: f64, wy: f64, s_all: f64, n: usize, m: usize) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let c = s_all - wx - wy;
    let e = 2.0 * c / (nf * mf) - 2.0 * wx / (nf * nf) - 2.0 * wy / (mf * mf);
    nf * mf / (nf + mf) * e
}

/// Sum of Euclidean distances over unordered point pairs, parallel over rows
/// with an index-ordered reduction.
fn pair_sum(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    par::map_indexed(n, |i| row_tail_sum(points, dim, i)).iter().sum()
}

/// Sequential variant for use inside already-parallel permutation workers.
fn pair_sum_serial(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    (0..n).map(|i| row_tail_sum(points, dim, i)).sum()
}

#[inline]
fn row_tail_sum(points: &[f64], dim: usize, i: usize) -> f64 {
    let pi = &points[i * dim..(i + 1) * dim];
    let mut acc = 0.0;
    for pj in points[(i + 1) * dim..].chunks_exact(dim) {
        let mut d2 = 0.0;
        for k in 0..dim {
            let d = pi[k] - pj[k];
            d2 += d * d;
        }
        acc += d2.sqrt();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn mean_stderr_matches_hand_computation() {
        let e = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(e.mean, 2.5);
        // sample variance 5/3, stderr sqrt(5/12)
        assert_relative_eq!(e.stderr, (5.0_f64 / 12.0).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(e.sigmas_from(2.5), 0.0);
    }

    #[test]
    fn sample_moments_recover_a_known_cloud() {
        // four points with exact mean (1, 0) and covariance [[2,0],[0,0.5]] / (n-1) scaling
        let pts = [2.0, 0.5, 0.0, -0.5, 2.0, -0.5, 0.0, 0.5];
        let (mean, cov) = sample_mean_cov(&pts, 2);
        assert_relative_eq!(mean[0], 1.0);
        assert_relative_eq!(mean[1], 0.0);
        assert_relative_eq!(cov[(0, 0)], 4.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(cov[(1, 1)], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(cov[(0, 1)], 0.0, epsilon = 1e-12);
    }

    fn gaussian_cloud(n: usize, dim: usize, shift: f64, seed_item: u64) -> Vec<f64> {
        let mut rng = stream_rng(1234, StreamDomain::Permutation, 1, seed_item);
        (0..n * dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + shift)
            .collect()
    }

    #[test]
    fn energy_test_accepts_identical_distributions() {
        let x = gaussian_cloud(400, 2, 0.0, 0);
        let y = gaussian_cloud(400, 2, 0.0, 1);
        let r = energy_distance_test(&x, &y, 2, 99, 7).unwrap();
        assert!(!r.rejects_at(0.01), "same-law samples rejected: p = {}", r.p_value);
    }

    #[test]
    fn energy_test_rejects_a_clear_mean_shift() {
        let x = gaussian_cloud(400, 2, 0.0, 2);
        let y = gaussian_cloud(400, 2, 1.5, 3);
        let r = energy_distance_test(&x, &y, 2, 99, 7).unwrap();
        assert!(r.rejects_at(0.01), "shifted samples accepted: p = {}", r.p_value);
        assert_relative_eq!(r.p_value, 0.01, max_relative = 1e-12); // saturates at 1/(B+1)
    }
}
