//! Probability measures used as steering marginals: lattice measures with one
//! mass per grid node, and Gaussian measures (possibly degenerate, so that a
//! Dirac is the zero-covariance special case).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg;

/// Tolerance on `sum(weights) == 1` for normalized grid measures.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// A nonnegative measure on a [`Grid`], stored as one mass per node (cell
/// volumes already folded in, so weights are dimensionless).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMeasure {
    grid: Arc<Grid>,
    weights: Vec<f64>,
    /// Sigma-finite measures (Schrodinger-system factors) skip the
    /// unit-mass requirement.
    sigma_finite: bool,
}

impl GridMeasure {
    /// A probability measure: weights must be nonnegative, finite, and sum to
    /// one within [`NORMALIZATION_TOL`].
    pub fn new(grid: Arc<Grid>, weights: Vec<f64>) -> Result<Self> {
        Self::check_weights(&grid, &weights)?;
        let mass: f64 = weights.iter().sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidSpec(format!(
                "grid measure mass {mass} deviates from 1 by more than {NORMALIZATION_TOL:e} \
                 (use new_sigma_finite for unnormalized measures)"
            )));
        }
        Ok(Self { grid, weights, sigma_finite: false })
    }

    /// An unnormalized (sigma-finite) measure; only nonnegativity and
    /// finiteness are enforced.
    pub fn new_sigma_finite(grid: Arc<Grid>, weights: Vec<f64>) -> Result<Self> {
        Self::check_weights(&grid, &weights)?;
        Ok(Self { grid, weights, sigma_finite: true })
    }

    /// Evaluates a density at every node, multiplies by cell volumes, and
    /// normalizes the result to a probability measure.
    pub fn from_density(grid: Arc<Grid>, density: impl Fn(&DVector<f64>) -> f64) -> Result<Self> {
        let vol = grid.cell_volume();
        let mut weights = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let w = density(&grid.node(i)) * vol;
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "density produced invalid weight {w} at node {i}"
                )));
            }
            weights.push(w);
        }
        let mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            return Err(Error::InvalidSpec("density has zero total mass on the grid".into()));
        }
        for w in &mut weights {
            *w /= mass;
        }
        Ok(Self { grid, weights, sigma_finite: false })
    }

    fn check_weights(grid: &Grid, weights: &[f64]) -> Result<()> {
        if weights.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "measure has {} weights for a grid with {} nodes",
                weights.len(),
                grid.len()
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidSpec(format!("weight {w} at node {i} is invalid")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_sigma_finite(&self) -> bool {
        self.sigma_finite
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Indices of nodes carrying more than `floor` mass.
    pub fn support(&self, floor: f64) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > floor)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total-variation distance `1/2 sum |w2 - w1|` on a shared grid.
    pub fn tv_distance(&self, other: &GridMeasure) -> Result<f64> {
        self.grid.ensure_same(&other.grid, "tv_distance")?;
        Ok(0.5
            * self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    /// Mean state under the measure (requires nonzero mass).
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.grid.dim());
        let mut buf = vec![0.0; self.grid.dim()];
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                self.grid.node_into(i, &mut buf);
                for (mk, &bk) in m.iter_mut().zip(buf.iter()) {
                    *mk += w * bk;
                }
            }
        }
        m / self.mass()
    }
}

/// A Gaussian measure `N(mean, cov)`; `cov` may be singular, and a Dirac mass
/// is exactly the zero-covariance case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::InvalidSpec(format!(
                "covariance is {}x{} but the mean has dimension {dim}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) || cov.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSpec("Gaussian moments must be finite".into()));
        }
        let asym = (&cov - cov.transpose()).amax();
        let scale = cov.amax().max(1.0);
        if asym > 1e-10 * scale {
            return Err(Error::InvalidSpec(format!(
                "covariance asymmetry {asym:e} exceeds tolerance"
            )));
        }
        let sym = linalg::symmetrized(&cov);
        let (lo, _) = linalg::symmetric_eig_range(&sym);
        if lo < -1e-12 * scale {
            return Err(Error::InvalidSpec(format!(
                "covariance has negative eigenvalue {lo:e}"
            )));
        }
        Ok(Self { mean, cov: sym })
    }

    /// Dirac mass at `x`: the zero-covariance Gaussian.
    pub fn dirac(x: DVector<f64>) -> Self {
        let dim = x.len();
        Self { mean: x, cov: DMatrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn is_dirac(&self) -> bool {
        self.cov.amax() == 0.0
    }

    /// Log-density at `y`; requires a nondegenerate covariance.
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        let chol = linalg::checked_cholesky(&self.cov, "Gaussian measure covariance")?;
        Ok(linalg::gaussian_log_density(&chol, &self.mean, y))
    }

    /// Draws one sample. Degenerate directions contribute nothing (a Dirac
    /// always returns its mean).
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> DVector<f64> {
        if self.is_dirac() {
            return self.mean.clone();
        }
        // Eigendecomposition instead of Cholesky so PSD-but-singular
        // covariances sample correctly.
        let eig = self.cov.clone().symmetric_eigen();
        let mut x = self.mean.clone();
        for (k, &l) in eig.eigenvalues.iter().enumerate() {
            if l > 0.0 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                x += eig.eigenvectors.column(k) * (l.sqrt() * z);
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use approx::assert_relative_eq;

    #[test]
    fn probability_measure_enforces_normalization() {
        let grid = Arc::new(Grid::cube(0.0, 1.0, 2, 1).unwrap());
        assert!(GridMeasure::new(grid.clone(), vec![0.5, 0.5]).is_ok());
        assert!(GridMeasure::new(grid.clone(), vec![0.5, 0.6]).is_err());
        // sigma-finite skips the mass check but still rejects negatives
        assert!(GridMeasure::new_sigma_finite(grid.clone(), vec![2.0, 3.0]).is_ok());
        assert!(GridMeasure::new_sigma_finite(grid, vec![-0.1, 0.2]).is_err());
    }

    #[test]
    fn from_density_normalizes_and_keeps_shape() {
        let grid = Arc::new(Grid::cube(-3.0, 3.0, 61, 1).unwrap());
        let m = GridMeasure::from_density(grid, |x| (-0.5 * x[0] * x[0]).exp()).unwrap();
        assert_relative_eq!(m.mass(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(m.mean()[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tv_distance_is_half_l1() {
        let grid = Arc::new(Grid::cube(0.0, 1.0, 2, 1).unwrap());
        let a = GridMeasure::new(grid.clone(), vec![1.0, 0.0]).unwrap();
        let b = GridMeasure::new(grid, vec![0.0, 1.0]).unwrap();
        assert_relative_eq!(a.tv_distance(&b).unwrap(), 1.0);
    }

    #[test]
    fn dirac_measure_samples_its_mean() {
        let d = GaussianMeasure::dirac(DVector::from_vec(vec![1.0, -2.0]));
        assert!(d.is_dirac());
        let mut rng = crate::rng::stream_rng(7, crate::rng::StreamDomain::Ensemble, 0, 0);
        let x = d.sample(&mut rng);
        assert_eq!(x, DVector::from_vec(vec![1.0, -2.0]));
        assert!(d.log_density(&x).is_err());
    }

    #[test]
    fn gaussian_rejects_asymmetric_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(GaussianMeasure::new(DVector::zeros(2), cov).is_err());
    }
}
