//! Small dense linear-algebra helpers shared by the numerical modules:
//! guarded Cholesky factorizations, log-sum-exp, Gaussian log-densities, and
//! the Van Loan block-exponential trick for controllability Gramians.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Condition-number cap for covariance factorizations. Beyond this the
/// density values are numerically meaningless and we fail instead.
pub const CONDITION_CAP: f64 = 1e14;

/// Numerically stable `log(sum(exp(v)))`. Empty input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m; // all -inf (empty support) or a stray +inf/NaN propagates
    }
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Smallest and largest eigenvalue of a symmetric matrix (via symmetric
/// eigendecomposition; used only for diagnostics and small matrices).
pub fn symmetric_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (lo, hi)
}

/// Cholesky factorization of a symmetric positive-definite matrix with a
/// conditioning guard. On failure the error names the offending eigenvalue so
/// callers can report *why* a covariance degenerated.
pub fn checked_cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let sym = symmetrized(m);
    let (lo, hi) = symmetric_eig_range(&sym);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Numerical {
            what,
            detail: "non-finite eigenvalue".into(),
            value: lo,
        });
    }
    if lo <= 0.0 {
        return Err(Error::Numerical {
            what,
            detail: "matrix is not positive definite; smallest eigenvalue".into(),
            value: lo,
        });
    }
    if hi / lo > CONDITION_CAP {
        return Err(Error::Numerical {
            what,
            detail: format!(
                "condition number {:e} exceeds cap {CONDITION_CAP:e}; smallest eigenvalue",
                hi / lo
            ),
            value: lo,
        });
    }
    Cholesky::new(sym).ok_or(Error::Numerical {
        what,
        detail: "Cholesky factorization failed; smallest eigenvalue".into(),
        value: lo,
    })
}

/// `(m + m^T) / 2`; covariance assemblies lose exact symmetry to roundoff.
pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Log-density of `N(mean, cov)` at `y`, given the Cholesky factor of `cov`.
pub fn gaussian_log_density(chol: &Cholesky<f64, Dyn>, mean: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let dim = mean.len() as f64;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let v = chol.l_dirty().solve_lower_triangular(&(y - mean)).expect("triangular solve");
    -0.5 * (dim * LN_2PI + log_det + v.norm_squared())
}

/// Log-determinant from a Cholesky factor.
pub fn cholesky_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// State transition matrix `Phi(tau) = exp(A tau)` together with the noise
/// Gramian `W(tau) = \int_0^tau exp(A s) Q exp(A^T s) ds`, computed exactly
/// (up to the matrix exponential) with the Van Loan block construction
///
/// ```text
/// exp( [-A  Q ]      )   [ F1  G1 ]
///      [ 0   A^T] tau  = [ 0   F2 ] ,   Phi = F2^T,  W = F2^T G1 .
/// ```
pub fn transition_and_gramian(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    tau: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = a.nrows();
    assert_eq!(q.nrows(), m, "Gramian source must match state dimension");
    let mut block = DMatrix::<f64>::zeros(2 * m, 2 * m);
    block.view_mut((0, 0), (m, m)).copy_from(&(-a * tau));
    block.view_mut((0, m), (m, m)).copy_from(&(q * tau));
    block.view_mut((m, m), (m, m)).copy_from(&(a.transpose() * tau));
    let e = block.exp();
    let g1 = e.view((0, m), (m, m)).into_owned();
    let f2 = e.view((m, m), (m, m)).into_owned();
    let phi = f2.transpose();
    let w = symmetrized(&(&phi * g1));
    (phi, w)
}

/// Gauss-Hermite nodes and weights for the standard normal weight,
/// `E[f(Z)] ~ sum_i w_i f(x_i)`, exact for polynomials of degree `2n - 1`.
/// Computed by the Golub-Welsch eigenvalue method on the Jacobi matrix of the
/// probabilists' Hermite recurrence (off-diagonal `sqrt(k)`); weights sum to
/// one.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidSpec("quadrature needs at least one node".into()));
    }
    if n == 1 {
        return Ok((vec![0.0], vec![1.0]));
    }
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().unzip())
}

/// Catmull-Rom interpolation weights for the four taps around a cell, at
/// fractional position `u` in `[0, 1]` between taps 1 and 2. Reproduces
/// quadratic polynomials exactly (tangents are central differences).
pub fn catmull_rom_weights(u: f64) -> [f64; 4] {
    let (u2, u3) = (u * u, u * u * u);
    [
        0.5 * (-u3 + 2.0 * u2 - u),
        0.5 * (3.0 * u3 - 5.0 * u2 + 2.0),
        0.5 * (-3.0 * u3 + 4.0 * u2 + u),
        0.5 * (u3 - u2),
    ]
}

/// Composite Simpson weights on `n` uniformly spaced nodes (n odd, n >= 3),
/// already multiplied by the spacing `h`.
pub fn simpson_weights(n: usize, h: f64) -> Result<Vec<f64>> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::InvalidSpec(format!(
            "Simpson rule needs an odd node count >= 3, got {n}"
        )));
    }
    let mut w = vec![0.0; n];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = if i == 0 || i == n - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        } * h
            / 3.0;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_sum_exp_matches_direct_sum_in_safe_range() {
        let v = [0.1, -0.3, 1.7];
        let direct: f64 = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(log_sum_exp(&v), direct, max_relative = 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_offsets() {
        let v = [-1000.0, -1000.0];
        assert_relative_eq!(log_sum_exp(&v), -1000.0 + 2.0_f64.ln(), max_relative = 1e-14);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn checked_cholesky_rejects_indefinite_matrices() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match checked_cholesky(&m, "test matrix") {
            Err(crate::Error::Numerical { value, .. }) => assert!(value < 0.0),
            other => panic!("expected a numerical error, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_log_density_matches_scalar_formula() {
        let cov = DMatrix::from_element(1, 1, 4.0);
        let chol = checked_cholesky(&cov, "cov").unwrap();
        let mean = DVector::from_element(1, 1.0);
        let y = DVector::from_element(1, 2.0);
        // N(2; 1, 4): -0.5 ln(2 pi 4) - (2-1)^2 / 8
        let expected = -0.5 * (LN_2PI + 4.0_f64.ln()) - 0.125;
        assert_relative_eq!(gaussian_log_density(&chol, &mean, &y), expected, max_relative = 1e-14);
    }

    #[test]
    fn van_loan_gramian_matches_integrated_wiener_closed_form() {
        // Chain with drift A = [[0,0],[1,0]] and unit noise in the first
        // coordinate: W(tau) = [[tau, tau^2/2], [tau^2/2, tau^3/3]].
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let tau = 0.7;
        let (phi, w) = transition_and_gramian(&a, &q, tau);
        assert_relative_eq!(phi[(1, 0)], tau, max_relative = 1e-12);
        assert_relative_eq!(w[(0, 0)], tau, max_relative = 1e-12);
        assert_relative_eq!(w[(0, 1)], tau * tau / 2.0, max_relative = 1e-12);
        assert_relative_eq!(w[(1, 1)], tau * tau * tau / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn simpson_weights_integrate_cubics_exactly() {
        let n = 11;
        let h = 0.1;
        let w = simpson_weights(n, h).unwrap();
        let integral: f64 = (0..n).map(|i| w[i] * (i as f64 * h).powi(3)).sum();
        assert_relative_eq!(integral, 0.25, max_relative = 1e-12); // x^3 on [0,1]
        assert!(simpson_weights(4, h).is_err());
    }

    #[test]
    fn gauss_hermite_reproduces_standard_normal_moments() {
        // E[Z^k] = 0 for odd k and (k - 1)!! for even k; an n-point rule is
        // exact through degree 2n - 1.
        let n = 6;
        let (nodes, weights) = gauss_hermite(n).unwrap();
        assert_eq!(nodes.len(), n);
        let exact = [1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0, 0.0, 105.0, 0.0, 945.0, 0.0];
        for (k, want) in exact.iter().enumerate().take(2 * n) {
            let got: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * x.powi(k as i32))
                .sum();
            assert_relative_eq!(got, *want, epsilon = 1e-9, max_relative = 1e-9);
        }
        let (one_node, one_weight) = gauss_hermite(1).unwrap();
        assert_eq!((one_node[0], one_weight[0]), (0.0, 1.0));
        assert!(gauss_hermite(0).is_err());
    }

    #[test]
    fn catmull_rom_weights_reproduce_quadratics() {
        // Taps at positions -1, 0, 1, 2 sampling p(s) = 2 + 3s - s^2 must
        // reproduce p at every fractional offset u in [0, 1].
        let p = |s: f64| 2.0 + 3.0 * s - s * s;
        for step in 0..=10 {
            let u = step as f64 / 10.0;
            let w = catmull_rom_weights(u);
            let got = w[0] * p(-1.0) + w[1] * p(0.0) + w[2] * p(1.0) + w[3] * p(2.0);
            assert_relative_eq!(got, p(u), epsilon = 1e-12);
        }
    }
}
