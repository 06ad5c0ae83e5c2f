//! The static bridge system on a lattice.
//!
//! Given a transition kernel `q` and marginals `mu0`, `muT`, the bridge
//! system asks for a sigma-finite initial factor `nu0` and a terminal
//! density ratio `rho_T` such that the coupling
//!
//! ```text
//! pi(i, j) = nu0(i) q(x_i, z_j) rho_T(j) vol(j)
//! ```
//!
//! has marginals `mu0` and `muT`. Writing `h(0, x_i) = sum_j q_ij rho_T(j)
//! vol(j)`, the marginal conditions read
//!
//! ```text
//! mu0(i) = nu0(i) h(0, x_i),        muT(j) = rho_T(j) vol(j) sum_i nu0(i) q_ij ,
//! ```
//!
//! and the pair is unique up to the scalar gauge `(c nu0, rho_T / c)`. The
//! solver alternates the two relations (iterative proportional fitting) in
//! log-domain, because `q` spans hundreds of orders of magnitude on fine
//! lattices, and stops when both marginal total-variation errors drop below
//! tolerance. Relative entropy between measures on the same lattice, and
//! between Gaussians in closed form, lives here as well: downstream cost
//! identities are differences of these quantities.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GridKernel;
use crate::linalg;
use crate::measure::{GaussianMeasure, GridMeasure};
use crate::par;

/// Default total-variation stopping tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Node masses at or below this floor are treated as zero support.
pub const SUPPORT_FLOOR: f64 = 1e-15;

/// The scalar-normalization convention applied to a solved potential pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gauge {
    /// `sum_i nu0(i) = 1`; the terminal ratio absorbs the reciprocal.
    UnitInitialMass,
}

/// Solved factors of the bridge system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgePotentials {
    /// Sigma-finite initial factor, gauged to unit total mass.
    pub nu0: GridMeasure,
    /// Terminal density ratio per grid node, log-domain (`-inf` off the
    /// target support).
    pub log_rho_t: Vec<f64>,
    pub gauge: Gauge,
}

impl BridgePotentials {
    /// `log h(0, x_i) = log sum_j q_ij rho_T(j) vol`, one entry per kernel
    /// source row, computed with a shifted sum so huge ratios cannot
    /// overflow.
    pub fn log_h0(&self, kernel: &GridKernel) -> Result<Vec<f64>> {
        kernel.grid().ensure_same(self.nu0.grid(), "h0 evaluation")?;
        let ln_vol = kernel.grid().cell_volume().ln();
        let (ratios, shift) = shifted_exp(&self.log_rho_t);
        Ok((0..kernel.n_sources())
            .map(|i| {
                let dot: f64 =
                    kernel.row(i).iter().zip(&ratios).map(|(&q, &r)| q * r).sum();
                if dot > 0.0 {
                    dot.ln() + shift + ln_vol
                } else {
                    log_dot_fallback(kernel.row(i), &self.log_rho_t) + ln_vol
                }
            })
            .collect())
    }
}

/// Per-iteration marginal errors (total variation), initial and terminal.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IterationLog {
    pub err0: Vec<f64>,
    pub err_t: Vec<f64>,
}

impl IterationLog {
    pub fn iterations(&self) -> usize {
        self.err0.len()
    }

    pub fn max_errors(&self) -> Vec<f64> {
        self.err0.iter().zip(&self.err_t).map(|(a, b)| a.max(*b)).collect()
    }

    /// `iter, err0, errT` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,err0,errT\n");
        for (k, (a, b)) in self.err0.iter().zip(&self.err_t).enumerate() {
            out.push_str(&format!("{k},{a:e},{b:e}\n"));
        }
        out
    }
}

struct ActiveSource {
    row: usize,
    node: usize,
    mass: f64,
    ln_mass: f64,
}

/// Solves the bridge system by alternating log-domain proportional fitting.
///
/// Preconditions: both marginals live on the kernel's lattice, the initial
/// marginal is supported on kernel source nodes, and wherever `muT` has mass
/// the pushed-forward initial law must be positive (mutual absolute
/// continuity). Stops when `max(TV_0, TV_T) < tol`; hitting `max_iter` first
/// is an error carrying the error curves and the last iterate.
pub fn solve_schrodinger_system(
    kernel: &GridKernel,
    mu0: &GridMeasure,
    mu_t: &GridMeasure,
    tol: f64,
    max_iter: usize,
) -> Result<(BridgePotentials, IterationLog)> {
    kernel.grid().ensure_same(mu0.grid(), "bridge initial marginal")?;
    kernel.grid().ensure_same(mu_t.grid(), "bridge terminal marginal")?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidSpec(format!("tolerance must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidSpec("max_iter must be at least 1".into()));
    }
    let grid = kernel.grid();
    let vol = grid.cell_volume();
    let ln_vol = vol.ln();
    let n_nodes = grid.len();

    let row_of: HashMap<usize, usize> = kernel
        .source_nodes()
        .iter()
        .enumerate()
        .map(|(row, &node)| (node, row))
        .collect();
    let mut active = Vec::new();
    for (node, &mass) in mu0.weights().iter().enumerate() {
        if mass <= SUPPORT_FLOOR {
            continue;
        }
        let &row = row_of.get(&node).ok_or_else(|| {
            Error::GridMismatch(format!(
                "initial marginal has mass {mass:e} at node {node}, which is not a kernel source"
            ))
        })?;
        active.push(ActiveSource { row, node, mass, ln_mass: mass.ln() });
    }
    if active.is_empty() {
        return Err(Error::InvalidSpec("initial marginal carries no mass above the support floor".into()));
    }
    let supp_t: Vec<usize> = mu_t.support(SUPPORT_FLOOR);
    if supp_t.is_empty() {
        return Err(Error::InvalidSpec("terminal marginal carries no mass above the support floor".into()));
    }

    // absolute-continuity precheck: the pushed-forward initial law must be
    // positive wherever the target has mass
    let ln_mu0: Vec<f64> = active.iter().map(|a| a.ln_mass).collect();
    let s0 = log_push(kernel, &active, &ln_mu0);
    for &j in &supp_t {
        if s0[j] == f64::NEG_INFINITY {
            return Err(Error::AbsoluteContinuity {
                node: j,
                mass: mu_t.weights()[j],
                floor: SUPPORT_FLOOR,
            });
        }
    }

    let mu_t_w = mu_t.weights();
    let mut log_nu0 = ln_mu0;
    let mut log_rho = vec![f64::NEG_INFINITY; n_nodes];
    for &j in &supp_t {
        log_rho[j] = 0.0;
    }
    let mut log = IterationLog::default();
    let mut converged = false;

    for _ in 0..max_iter {
        // terminal error of the current pair, then refit the ratio
        let log_s = log_push(kernel, &active, &log_nu0);
        let mut err_t = 0.0;
        for j in 0..n_nodes {
            let fit = (log_s[j] + log_rho[j] + ln_vol).exp();
            err_t += (fit - mu_t_w[j]).abs();
        }
        err_t *= 0.5;
        for &j in &supp_t {
            if log_s[j] == f64::NEG_INFINITY {
                return Err(Error::AbsoluteContinuity {
                    node: j,
                    mass: mu_t_w[j],
                    floor: SUPPORT_FLOOR,
                });
            }
            log_rho[j] = mu_t_w[j].ln() - ln_vol - log_s[j];
        }

        // initial error of (old nu0, new ratio), then refit nu0
        let (ratios, shift) = shifted_exp(&log_rho);
        let mut err0 = 0.0;
        for (k, src) in active.iter().enumerate() {
            let dot: f64 = kernel.row(src.row).iter().zip(&ratios).map(|(&q, &r)| q * r).sum();
            let log_h0 = if dot > 0.0 {
                dot.ln() + shift + ln_vol
            } else {
                log_dot_fallback(kernel.row(src.row), &log_rho) + ln_vol
            };
            if log_h0 == f64::NEG_INFINITY {
                return Err(Error::AbsoluteContinuity {
                    node: src.node,
                    mass: src.mass,
                    floor: SUPPORT_FLOOR,
                });
            }
            err0 += ((log_nu0[k] + log_h0).exp() - src.mass).abs();
            log_nu0[k] = src.ln_mass - log_h0;
        }
        err0 *= 0.5;

        // gauge: unit nu0 mass, ratio compensated so the pair is unchanged
        let c = linalg::log_sum_exp(&log_nu0);
        for v in &mut log_nu0 {
            *v -= c;
        }
        for &j in &supp_t {
            log_rho[j] += c;
        }

        log.err0.push(err0);
        log.err_t.push(err_t);
        if err0.max(err_t) < tol {
            converged = true;
            break;
        }
    }

    if !converged {
        let last = *log.max_errors().last().unwrap_or(&f64::INFINITY);
        return Err(Error::SolverDiverged {
            iterations: log.iterations(),
            last_error: last,
            tolerance: tol,
            log: log.max_errors(),
            last_nu0_log: log_nu0,
            last_rho_log: log_rho,
        });
    }

    let mut weights = vec![0.0; n_nodes];
    for (k, src) in active.iter().enumerate() {
        weights[src.node] = log_nu0[k].exp();
    }
    let nu0 = GridMeasure::new_sigma_finite(grid.clone(), weights)?;
    Ok((BridgePotentials { nu0, log_rho_t: log_rho, gauge: Gauge::UnitInitialMass }, log))
}

/// `log s_j = log sum_k exp(w_k) q(row_k, j)` for all nodes: shifted linear
/// mat-vec, with a per-node log-sum-exp rescue for nodes that underflow.
fn log_push(kernel: &GridKernel, active: &[ActiveSource], log_w: &[f64]) -> Vec<f64> {
    let n_nodes = kernel.grid().len();
    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return vec![f64::NEG_INFINITY; n_nodes];
    }
    const CHUNK: usize = 64;
    let n_chunks = active.len().div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = par::map_indexed(n_chunks, |c| {
        let mut acc = vec![0.0; n_nodes];
        for k in c * CHUNK..((c + 1) * CHUNK).min(active.len()) {
            let w = (log_w[k] - shift).exp();
            if w == 0.0 {
                continue;
            }
            for (a, &q) in acc.iter_mut().zip(kernel.row(active[k].row)) {
                *a += w * q;
            }
        }
        acc
    });
    let mut s = vec![0.0; n_nodes];
    for p in partials {
        for (a, v) in s.iter_mut().zip(p) {
            *a += v;
        }
    }
    s.into_iter()
        .enumerate()
        .map(|(j, v)| {
            if v > 0.0 {
                v.ln() + shift
            } else {
                // rescue pass: exact log-sum-exp over this column
                let terms: Vec<f64> = active
                    .iter()
                    .enumerate()
                    .map(|(k, src)| log_w[k] + kernel.value(src.row, j).ln())
                    .collect();
                linalg::log_sum_exp(&terms)
            }
        })
        .collect()
}

/// `log sum_j q_j exp(log_r_j)` evaluated term by term; rescue path for rows
/// whose shifted linear dot product underflowed.
fn log_dot_fallback(row: &[f64], log_r: &[f64]) -> f64 {
    let terms: Vec<f64> = row.iter().zip(log_r).map(|(&q, &lr)| q.ln() + lr).collect();
    linalg::log_sum_exp(&terms)
}

/// Returns `exp(v - shift)` with `shift = max v`, mapping `-inf` to zero.
fn shifted_exp(log_v: &[f64]) -> (Vec<f64>, f64) {
    let shift = log_v.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return (vec![0.0; log_v.len()], 0.0);
    }
    (log_v.iter().map(|&v| (v - shift).exp()).collect(), shift)
}

/// The coupling induced by solved potentials, with both of its marginals.
#[derive(Debug, Clone)]
pub struct Coupling {
    /// Joint masses, kernel sources by grid nodes.
    pub joint: DMatrix<f64>,
    /// Row sums placed at the source nodes (sigma-finite diagnostic view).
    pub marginal0: GridMeasure,
    /// Column sums (sigma-finite diagnostic view).
    pub marginal_t: GridMeasure,
}

impl Coupling {
    pub fn total_mass(&self) -> f64 {
        self.joint.sum()
    }
}

/// Assembles `pi(i, j) = nu0(i) q_ij rho_T(j) vol` in log-domain (large
/// ratios at thin target nodes must not overflow mid-product).
pub fn coupling_measure(pot: &BridgePotentials, kernel: &GridKernel) -> Result<Coupling> {
    kernel.grid().ensure_same(pot.nu0.grid(), "coupling assembly")?;
    if pot.log_rho_t.len() != kernel.grid().len() {
        return Err(Error::GridMismatch(format!(
            "ratio has {} entries for a grid of {} nodes",
            pot.log_rho_t.len(),
            kernel.grid().len()
        )));
    }
    let n_nodes = kernel.grid().len();
    let n_src = kernel.n_sources();
    let ln_vol = kernel.grid().cell_volume().ln();
    let nu_w = pot.nu0.weights();

    let rows: Vec<Vec<f64>> = par::map_indexed(n_src, |i| {
        let node = kernel.source_nodes()[i];
        let ln_nu = nu_w[node].ln(); // -inf for zero weight
        kernel
            .row(i)
            .iter()
            .zip(&pot.log_rho_t)
            .map(|(&q, &lr)| (ln_nu + q.ln() + lr + ln_vol).exp())
            .collect()
    });

    let mut joint = DMatrix::zeros(n_src, n_nodes);
    let mut m0 = vec![0.0; n_nodes];
    let mut mt = vec![0.0; n_nodes];
    for (i, row) in rows.iter().enumerate() {
        let node = kernel.source_nodes()[i];
        for (j, &v) in row.iter().enumerate() {
            joint[(i, j)] = v;
            m0[node] += v;
            mt[j] += v;
        }
    }
    Ok(Coupling {
        joint,
        marginal0: GridMeasure::new_sigma_finite(kernel.grid().clone(), m0)?,
        marginal_t: GridMeasure::new_sigma_finite(kernel.grid().clone(), mt)?,
    })
}

/// Relative entropy `H(nu2 | nu1) = sum w2 log(w2 / w1)` of lattice measures
/// on a shared grid, `0 log 0 = 0`; `+inf` when `nu2` has mass where `nu1`
/// has none. The reference may be sigma-finite, in which case the value can
/// be negative.
pub fn relative_entropy_grid(nu2: &GridMeasure, nu1: &GridMeasure) -> Result<f64> {
    nu2.grid().ensure_same(nu1.grid(), "relative entropy")?;
    let mut h = 0.0;
    for (&a, &b) in nu2.weights().iter().zip(nu1.weights()) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        h += a * (a.ln() - b.ln());
    }
    Ok(h)
}

/// Closed-form Gaussian relative entropy
/// `H(N2 | N1) = (tr(C1^-1 C2) + dm^T C1^-1 dm - nd + log det C1 - log det C2) / 2`.
/// Returns `+inf` when `N2` is singular (it then lives on a lower-dimensional
/// set that `N1` never charges); `N1` must be nondegenerate unless the two
/// measures are identical.
pub fn relative_entropy_gaussian(nu2: &GaussianMeasure, nu1: &GaussianMeasure) -> Result<f64> {
    if nu2.dim() != nu1.dim() {
        return Err(Error::InvalidSpec(format!(
            "dimension mismatch: {} vs {}",
            nu2.dim(),
            nu1.dim()
        )));
    }
    if nu2.mean() == nu1.mean() && nu2.cov() == nu1.cov() {
        return Ok(0.0);
    }
    let chol1 = linalg::checked_cholesky(nu1.cov(), "relative entropy reference covariance")?;
    let (lo2, hi2) = linalg::symmetric_eig_range(nu2.cov());
    if lo2 <= hi2.max(1.0) * 1e-14 {
        return Ok(f64::INFINITY);
    }
    let nd = nu1.dim() as f64;
    let trace = chol1.solve(nu2.cov()).trace();
    let dm = nu2.mean() - nu1.mean();
    let quad = dm.dot(&chol1.solve(&dm.clone().into()).column(0).into_owned());
    let log_det1 = linalg::cholesky_log_det(&chol1);
    let chol2 = linalg::checked_cholesky(nu2.cov(), "relative entropy covariance")?;
    let log_det2 = linalg::cholesky_log_det(&chol2);
    Ok(0.5 * (trace + quad - nd + log_det1 - log_det2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, Grid};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use std::sync::Arc;

    /// Two-node lattice with unit cell volume: densities and masses agree.
    fn toy() -> (Arc<Grid>, GridKernel, GridMeasure, GridMeasure) {
        let grid = Arc::new(Grid::new(vec![Axis::new(0.0, 1.0, 2).unwrap()]).unwrap());
        let kernel = GridKernel::from_rows(
            grid.clone(),
            vec![0, 1],
            vec![vec![0.8, 0.2], vec![0.3, 0.7]],
            0.0,
            1.0,
        )
        .unwrap();
        let mu0 = GridMeasure::new(grid.clone(), vec![0.5, 0.5]).unwrap();
        let mu_t = GridMeasure::new(grid.clone(), vec![0.5, 0.5]).unwrap();
        (grid, kernel, mu0, mu_t)
    }

    /// Independent linear-domain fixed-point iteration on the 2x2 system.
    fn toy_oracle() -> ([f64; 2], [f64; 2]) {
        let q = [[0.8, 0.2], [0.3, 0.7]];
        let (mu0, mu_t) = ([0.5, 0.5], [0.5, 0.5]);
        let mut nu = mu0;
        let mut rho = [1.0, 1.0];
        for _ in 0..200 {
            let s = [
                nu[0] * q[0][0] + nu[1] * q[1][0],
                nu[0] * q[0][1] + nu[1] * q[1][1],
            ];
            rho = [mu_t[0] / s[0], mu_t[1] / s[1]];
            let h = [
                q[0][0] * rho[0] + q[0][1] * rho[1],
                q[1][0] * rho[0] + q[1][1] * rho[1],
            ];
            nu = [mu0[0] / h[0], mu0[1] / h[1]];
            let total = nu[0] + nu[1];
            nu = [nu[0] / total, nu[1] / total];
            rho = [rho[0] * total, rho[1] * total];
        }
        (nu, rho)
    }

    #[test]
    fn two_node_system_matches_the_fixed_point_oracle() {
        let (_, kernel, mu0, mu_t) = toy();
        let (pot, log) = solve_schrodinger_system(&kernel, &mu0, &mu_t, 1e-13, 1000).unwrap();
        let (nu, rho) = toy_oracle();
        for i in 0..2 {
            assert_relative_eq!(pot.nu0.weights()[i], nu[i], epsilon = 1e-10);
            assert_relative_eq!(pot.log_rho_t[i].exp(), rho[i], epsilon = 1e-10);
        }
        assert!(log.iterations() > 0 && log.iterations() < 1000);
        assert_relative_eq!(pot.nu0.mass(), 1.0, epsilon = 1e-12);

        // the induced coupling reproduces the oracle joint and both marginals
        let coupling = coupling_measure(&pot, &kernel).unwrap();
        let q = [[0.8, 0.2], [0.3, 0.7]];
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(coupling.joint[(i, j)], nu[i] * q[i][j] * rho[j], epsilon = 1e-10);
            }
        }
        assert_relative_eq!(coupling.total_mass(), 1.0, epsilon = 1e-9);
        assert!(coupling.marginal0.tv_distance(&mu0).unwrap() < 1e-10);
        assert!(coupling.marginal_t.tv_distance(&mu_t).unwrap() < 1e-10);
    }

    #[test]
    fn already_attained_target_needs_a_constant_ratio() {
        let (_, kernel, mu0, _) = toy();
        let mu_t = kernel.push_forward(&mu0).unwrap();
        let (pot, log) = solve_schrodinger_system(&kernel, &mu0, &mu_t, 1e-12, 100).unwrap();
        // rho_T constant = 1 under the unit-mass gauge, nu0 = mu0
        for i in 0..2 {
            assert_relative_eq!(pot.log_rho_t[i].exp(), 1.0, epsilon = 1e-9);
            assert_relative_eq!(pot.nu0.weights()[i], mu0.weights()[i], epsilon = 1e-9);
        }
        assert!(log.iterations() <= 2, "attained target should converge immediately");
    }

    #[test]
    fn gauge_rescaling_leaves_the_coupling_unchanged() {
        let (grid, kernel, mu0, mu_t) = toy();
        let (pot, _) = solve_schrodinger_system(&kernel, &mu0, &mu_t, 1e-13, 1000).unwrap();
        let c: f64 = 37.5;
        let scaled = BridgePotentials {
            nu0: GridMeasure::new_sigma_finite(
                grid,
                pot.nu0.weights().iter().map(|w| w * c).collect(),
            )
            .unwrap(),
            log_rho_t: pot.log_rho_t.iter().map(|lr| lr - c.ln()).collect(),
            gauge: pot.gauge,
        };
        let a = coupling_measure(&pot, &kernel).unwrap();
        let b = coupling_measure(&scaled, &kernel).unwrap();
        assert!((a.joint.clone() - b.joint.clone()).amax() < 1e-12);
    }

    #[test]
    fn unreachable_target_mass_names_the_node() {
        let grid = Arc::new(Grid::new(vec![Axis::new(0.0, 1.0, 2).unwrap()]).unwrap());
        let kernel = GridKernel::from_rows(
            grid.clone(),
            vec![0, 1],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            0.0,
            1.0,
        )
        .unwrap();
        let mu0 = GridMeasure::new(grid.clone(), vec![0.5, 0.5]).unwrap();
        let mu_t = GridMeasure::new(grid, vec![0.5, 0.5]).unwrap();
        match solve_schrodinger_system(&kernel, &mu0, &mu_t, 1e-8, 100) {
            Err(Error::AbsoluteContinuity { node, mass, .. }) => {
                assert_eq!(node, 1);
                assert_relative_eq!(mass, 0.5);
            }
            other => panic!("expected absolute-continuity error, got {other:?}"),
        }
    }

    #[test]
    fn iteration_cap_reports_the_curve_and_last_iterate() {
        let (_, kernel, mu0, mu_t) = toy();
        match solve_schrodinger_system(&kernel, &mu0, &mu_t, 1e-15, 3) {
            Err(Error::SolverDiverged { iterations, log, last_nu0_log, last_rho_log, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(log.len(), 3);
                assert_eq!(last_nu0_log.len(), 2);
                assert_eq!(last_rho_log.len(), 2);
            }
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn marginal_errors_mostly_decrease_on_a_gaussian_steering_problem() {
        use crate::chain::LinearChainSpec;
        use crate::kernels::gaussian_kernel;

        let lin = LinearChainSpec::double_integrator(1.0);
        let k = gaussian_kernel(&lin, 0.0, 1.0).unwrap();
        let grid = Arc::new(Grid::cube(-4.0, 4.0, 21, 2).unwrap());
        let sources: Vec<usize> = (0..grid.len()).collect();
        let gk = GridKernel::from_gaussian(&k, grid.clone(), sources).unwrap();
        let mu0 = GridMeasure::from_density(grid.clone(), |x| {
            (-((x[0] + 1.0).powi(2) + x[1] * x[1]) / 0.3).exp()
        })
        .unwrap();
        let mu_t = GridMeasure::from_density(grid.clone(), |x| {
            (-((x[0] - 1.0).powi(2) / 0.4 + (x[1] - 0.5).powi(2) / 0.2)).exp()
        })
        .unwrap();
        let (pot, log) = solve_schrodinger_system(&gk, &mu0, &mu_t, 1e-9, 5000).unwrap();
        let errs = log.max_errors();
        let decreasing =
            errs.windows(2).filter(|w| w[1] <= w[0]).count() as f64 / (errs.len() - 1).max(1) as f64;
        assert!(decreasing >= 0.95, "only {:.0}% of steps decreased", decreasing * 100.0);

        // potentials reproduce both marginals through the coupling
        let coupling = coupling_measure(&pot, &gk).unwrap();
        assert!(coupling.marginal0.tv_distance(&mu0).unwrap() < 1e-8);
        assert!(coupling.marginal_t.tv_distance(&mu_t).unwrap() < 1e-8);
        assert!((coupling.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_entropy_grid_basics() {
        let grid = Arc::new(Grid::cube(0.0, 1.0, 3, 1).unwrap());
        let a = GridMeasure::new(grid.clone(), vec![0.2, 0.3, 0.5]).unwrap();
        let b = GridMeasure::new(grid.clone(), vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(relative_entropy_grid(&a, &a).unwrap(), 0.0);
        let h = relative_entropy_grid(&a, &b).unwrap();
        assert!(h > 0.0);
        // hand value: 0.2 ln(1/2) + 0.3 ln(3/4) + 0.5 ln(5/2)
        let expect = 0.2 * (0.5f64).ln() + 0.3 * (0.75f64).ln() + 0.5 * (2.5f64).ln();
        assert_relative_eq!(h, expect, epsilon = 1e-14);
        // mass outside the reference support
        let c = GridMeasure::new(grid, vec![0.0, 0.5, 0.5]).unwrap();
        assert_eq!(relative_entropy_grid(&a, &c).unwrap(), f64::INFINITY);
        assert!(relative_entropy_grid(&c, &a).unwrap().is_finite());
    }

    #[test]
    fn gaussian_relative_entropy_closed_forms() {
        let n01 = GaussianMeasure::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let n11 =
            GaussianMeasure::new(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(relative_entropy_gaussian(&n01, &n11).unwrap(), 0.5, epsilon = 1e-14);
        assert_relative_eq!(relative_entropy_gaussian(&n01, &n01).unwrap(), 0.0);

        // 2d: H(N((1,1), 0.25 S) | N(0, S)) with S = [[1, .5], [.5, 1]]
        //   = (tr + quad - 2 + logdet) / 2
        //   = (0.5 + 4/3 - 2 + ln 16) / 2 = 1.3029610277865572
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let a = GaussianMeasure::new(DVector::from_vec(vec![1.0, 1.0]), 0.25 * &s).unwrap();
        let b = GaussianMeasure::new(DVector::zeros(2), s).unwrap();
        assert_relative_eq!(
            relative_entropy_gaussian(&a, &b).unwrap(),
            1.302_961_027_786_557_2,
            epsilon = 1e-12
        );

        // singular numerator: charged subspace the reference never hits
        let dirac = GaussianMeasure::dirac(DVector::zeros(1));
        assert_eq!(relative_entropy_gaussian(&dirac, &n01).unwrap(), f64::INFINITY);
        // identical singular measures still have zero entropy
        assert_eq!(relative_entropy_gaussian(&dirac, &dirac).unwrap(), 0.0);
    }

    #[test]
    fn grid_relative_entropy_converges_to_the_gaussian_value() {
        // H(N(0,1) | N(1,1)) = 0.5 recovered under lattice refinement.
        // Lattice sums of analytic Gaussians converge super-exponentially in
        // the spacing, so the trend is only visible on genuinely coarse
        // lattices; by spacing ~0.5 the value is machine-exact.
        let mut errors = Vec::new();
        for &n in &[11usize, 15, 21] {
            let grid = Arc::new(Grid::cube(-10.0, 11.0, n, 1).unwrap());
            let a = GridMeasure::from_density(grid.clone(), |x| (-x[0] * x[0] / 2.0).exp()).unwrap();
            let b = GridMeasure::from_density(grid.clone(), |x| {
                (-(x[0] - 1.0) * (x[0] - 1.0) / 2.0).exp()
            })
            .unwrap();
            errors.push((relative_entropy_grid(&a, &b).unwrap() - 0.5).abs());
        }
        for w in errors.windows(2) {
            assert!(w[1] < w[0], "refinement must improve the entropy: {errors:?}");
        }
        assert!(errors[2] < 1e-3, "finest lattice must match the closed form: {errors:?}");
    }
}
