//! Transition kernels of chain diffusions.
//!
//! For a linear chain `dx = A x dt + G sigma0 dW` the kernel is the Gaussian
//!
//! ```text
//! q(s, x, t, .) = N( Phi(t-s) x,  Sigma(t-s) ),
//! Phi(tau) = exp(A tau),   Sigma(tau) = int_0^tau Phi(r) G a G^T Phi(r)^T dr,
//! ```
//!
//! with `Sigma` the controllability Gramian of `(A, G sigma0)`: singular
//! exactly when the Kalman rank check fails. Both matrices come from one Van
//! Loan block exponential, so the only approximation is the matrix
//! exponential itself.
//!
//! For nonlinear chains densities are estimated by Monte Carlo: Euler-Maruyama
//! paths from each source, smoothed at the terminal time by a Gaussian
//! mollifier `phi_eps` centered at each grid node,
//!
//! ```text
//! q(s, x, t, z)  ~  E_{s,x} [ phi_eps(x_t - z) ] ,
//! ```
//!
//! which converges to the density as `eps -> 0` and paths increase. Rows are
//! renormalized to unit mass on the grid; the pre-normalization mass is kept
//! as a diagnostic because a large deficit means the grid misses the bulk of
//! the law. A Feynman-Kac variant weights paths by `exp(-int kappa dt)` for
//! killed chains.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{embedding_matrix, ChainSpec, LinearChainSpec};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg;
use crate::measure::{GaussianMeasure, GridMeasure};
use crate::par;
use crate::rng::{stream_rng, StreamDomain};
use crate::stats::{mean_stderr, Estimate};

/// Post-renormalization row mass must hit 1 within this tolerance.
pub const ROW_MASS_TOL: f64 = 1e-9;
/// Raw (pre-renormalization) row mass outside `1 +- RENORM_WARN_BOUND`
/// triggers a diagnostic warning.
pub const RENORM_WARN_BOUND: f64 = 0.2;
/// Mollifier contributions beyond this many standard deviations are dropped;
/// the truncated relative mass is about `exp(-18) ~ 1.5e-8`.
const MOLLIFIER_WINDOW_SIGMAS: f64 = 6.0;
/// Paths whose state norm exceeds this default are reported as blow-ups.
pub const DEFAULT_BLOW_UP_NORM: f64 = 1e8;

/// Gaussian transition kernel `q(s, x, t, y) = N(y; Phi x, Sigma)` of a
/// linear chain.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    s: f64,
    t: f64,
    phi: DMatrix<f64>,
    sigma: DMatrix<f64>,
    /// Cholesky factor of `sigma`; absent when `s == t` (the kernel is then
    /// the identity map and has no density).
    chol: Option<Cholesky<f64, Dyn>>,
}

impl GaussianKernel {
    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.phi * x
    }

    /// Log of the transition density. Degenerate kernels (`s == t`, or a
    /// Gramian that failed its conditioning check) have none.
    pub fn log_density(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let chol = self.chol.as_ref().ok_or_else(|| {
            let (lo, _) = linalg::symmetric_eig_range(&self.sigma);
            Error::Numerical {
                what: "transition density",
                detail: "kernel covariance is singular; smallest eigenvalue".into(),
                value: lo,
            }
        })?;
        Ok(linalg::gaussian_log_density(chol, &self.mean(x), y))
    }

    pub fn density(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density(x, y)?.exp())
    }

    /// Chapman-Kolmogorov composition: `self` from `s` to `t`, then `later`
    /// from `t` to `u`.
    pub fn compose(&self, later: &GaussianKernel) -> Result<GaussianKernel> {
        if (self.t - later.s).abs() > 1e-12 * (1.0 + self.t.abs()) {
            return Err(Error::InvalidSpec(format!(
                "cannot compose kernels: first ends at t={}, second starts at s={}",
                self.t, later.s
            )));
        }
        let phi = &later.phi * &self.phi;
        let sigma = linalg::symmetrized(&(&later.phi * &self.sigma * later.phi.transpose() + &later.sigma));
        let chol = linalg::checked_cholesky(&sigma, "composed kernel covariance").ok();
        Ok(GaussianKernel { s: self.s, t: later.t, phi, sigma, chol })
    }

    /// Pushes a Gaussian law through the kernel:
    /// `N(m, C) -> N(Phi m, Phi C Phi^T + Sigma)`.
    pub fn push_forward(&self, mu: &GaussianMeasure) -> Result<GaussianMeasure> {
        if mu.dim() != self.dim() {
            return Err(Error::InvalidSpec(format!(
                "measure dim {} does not match kernel dim {}",
                mu.dim(),
                self.dim()
            )));
        }
        let mean = &self.phi * mu.mean();
        let cov = linalg::symmetrized(&(&self.phi * mu.cov() * self.phi.transpose() + &self.sigma));
        GaussianMeasure::new(mean, cov)
    }
}

/// Builds the closed-form kernel of a linear chain over `[s, t]`,
/// `0 <= s <= t`. At `s == t` the kernel degenerates to the identity (useful
/// for push-forwards, but it has no density).
pub fn gaussian_kernel(spec: &LinearChainSpec, s: f64, t: f64) -> Result<GaussianKernel> {
    if !(s.is_finite() && t.is_finite()) || s < 0.0 || t < s {
        return Err(Error::InvalidSpec(format!("kernel needs 0 <= s <= t, got s={s}, t={t}")));
    }
    let nd = spec.dim();
    if t == s {
        return Ok(GaussianKernel {
            s,
            t,
            phi: DMatrix::identity(nd, nd),
            sigma: DMatrix::zeros(nd, nd),
            chol: None,
        });
    }
    let g = embedding_matrix(spec.n(), spec.d());
    let a0 = spec.sigma0() * spec.sigma0().transpose();
    let q = &g * a0 * g.transpose();
    let (phi, sigma) = linalg::transition_and_gramian(spec.a_matrix(), &q, t - s);
    let chol = linalg::checked_cholesky(&sigma, "Gramian covariance").ok();
    Ok(GaussianKernel { s, t, phi, sigma, chol })
}

/// Isotropic Gaussian bump of width `epsilon` centered at `center`;
/// integrates to one and converges weakly to the Dirac mass at the center.
#[derive(Debug, Clone)]
pub struct Mollifier {
    pub center: DVector<f64>,
    pub epsilon: f64,
}

impl Mollifier {
    pub fn new(center: DVector<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidSpec(format!("mollifier width must be positive, got {epsilon}")));
        }
        Ok(Self { center, epsilon })
    }

    pub fn log_eval(&self, y: &DVector<f64>) -> f64 {
        let dim = self.center.len() as f64;
        let d2 = (y - &self.center).norm_squared();
        -0.5 * dim * (linalg::LN_2PI + 2.0 * self.epsilon.ln()) - d2 / (2.0 * self.epsilon * self.epsilon)
    }

    pub fn eval(&self, y: &DVector<f64>) -> f64 {
        self.log_eval(y).exp()
    }
}

/// How a [`GridKernel`] was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum KernelProvenance {
    /// Discretized closed-form Gaussian kernel.
    Gaussian,
    /// Monte Carlo estimate.
    MonteCarlo { n_paths: usize, dt: f64, epsilon: f64, seed: u64 },
    /// Hand-assembled density rows.
    Synthetic,
}

/// A transition kernel restricted to a lattice: one density row per source
/// node, each renormalized to unit mass under the rectangle rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridKernel {
    grid: Arc<Grid>,
    source_nodes: Vec<usize>,
    /// Row-major `n_sources x grid.len()` renormalized densities.
    values: Vec<f64>,
    /// Pre-renormalization mass per row.
    raw_masses: Vec<f64>,
    s: f64,
    t: f64,
    provenance: KernelProvenance,
}

impl GridKernel {
    /// Discretizes a closed-form Gaussian kernel onto the lattice.
    pub fn from_gaussian(
        kernel: &GaussianKernel,
        grid: Arc<Grid>,
        source_nodes: Vec<usize>,
    ) -> Result<Self> {
        if grid.dim() != kernel.dim() {
            return Err(Error::GridMismatch(format!(
                "grid dim {} vs kernel dim {}",
                grid.dim(),
                kernel.dim()
            )));
        }
        check_source_nodes(&grid, &source_nodes)?;
        let n_nodes = grid.len();
        let rows: Vec<Vec<f64>> = par::try_map_indexed(source_nodes.len(), |i| {
            let x = grid.node(source_nodes[i]);
            let mean = kernel.mean(&x);
            let mut row = Vec::with_capacity(n_nodes);
            let chol = kernel.chol.as_ref().ok_or_else(|| Error::Numerical {
                what: "grid kernel row",
                detail: "kernel covariance is singular; cannot discretize".into(),
                value: 0.0,
            })?;
            for j in 0..n_nodes {
                row.push(linalg::gaussian_log_density(chol, &mean, &grid.node(j)).exp());
            }
            Ok(row)
        })?;
        Self::assemble(grid, source_nodes, rows, kernel.s, kernel.t, KernelProvenance::Gaussian)
    }

    /// Builds a kernel from explicit density rows (one per source node);
    /// rows are renormalized to unit mass like every other constructor.
    pub fn from_rows(
        grid: Arc<Grid>,
        source_nodes: Vec<usize>,
        rows: Vec<Vec<f64>>,
        s: f64,
        t: f64,
    ) -> Result<Self> {
        check_source_nodes(&grid, &source_nodes)?;
        if rows.len() != source_nodes.len() || rows.iter().any(|r| r.len() != grid.len()) {
            return Err(Error::GridMismatch(format!(
                "need {} rows of length {}",
                source_nodes.len(),
                grid.len()
            )));
        }
        if rows.iter().flatten().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidSpec("kernel densities must be finite and nonnegative".into()));
        }
        Self::assemble(grid, source_nodes, rows, s, t, KernelProvenance::Synthetic)
    }

    fn assemble(
        grid: Arc<Grid>,
        source_nodes: Vec<usize>,
        rows: Vec<Vec<f64>>,
        s: f64,
        t: f64,
        provenance: KernelProvenance,
    ) -> Result<Self> {
        let vol = grid.cell_volume();
        let mut values = Vec::with_capacity(source_nodes.len() * grid.len());
        let mut raw_masses = Vec::with_capacity(source_nodes.len());
        for (i, mut row) in rows.into_iter().enumerate() {
            let mass: f64 = row.iter().sum::<f64>() * vol;
            if !(mass.is_finite() && mass > 0.0) {
                return Err(Error::Numerical {
                    what: "kernel row renormalization",
                    detail: format!("row {i} has invalid mass; is the grid in the wrong place?"),
                    value: mass,
                });
            }
            for v in &mut row {
                *v /= mass;
            }
            raw_masses.push(mass);
            values.extend_from_slice(&row);
        }
        Ok(Self { grid, source_nodes, values, raw_masses, s, t, provenance })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn source_nodes(&self) -> &[usize] {
        &self.source_nodes
    }

    pub fn n_sources(&self) -> usize {
        self.source_nodes.len()
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn provenance(&self) -> &KernelProvenance {
        &self.provenance
    }

    /// Renormalized density from source row `i` to target node `j`.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.len() + j]
    }

    /// Full density row of source `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.grid.len()..(i + 1) * self.grid.len()]
    }

    pub fn raw_mass(&self, i: usize) -> f64 {
        self.raw_masses[i]
    }

    /// Rows whose raw mass missed 1 by more than [`RENORM_WARN_BOUND`]: the
    /// lattice is clipping or undersampling those sources.
    pub fn renormalization_warnings(&self) -> Vec<(usize, f64)> {
        self.raw_masses
            .iter()
            .enumerate()
            .filter(|(_, &m)| (m - 1.0).abs() > RENORM_WARN_BOUND)
            .map(|(i, &m)| (i, m))
            .collect()
    }

    /// Pushes a lattice measure supported on the source nodes through the
    /// kernel; masses are conserved to numerical precision.
    pub fn push_forward(&self, mu: &GridMeasure) -> Result<GridMeasure> {
        self.grid.ensure_same(mu.grid(), "grid kernel push-forward")?;
        let row_of: std::collections::HashMap<usize, usize> = self
            .source_nodes
            .iter()
            .enumerate()
            .map(|(row, &node)| (node, row))
            .collect();
        let vol = self.grid.cell_volume();
        let mut out = vec![0.0; self.grid.len()];
        for (node, &w) in mu.weights().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let &row = row_of.get(&node).ok_or_else(|| {
                Error::GridMismatch(format!(
                    "measure puts mass {w:e} on node {node}, which is not a kernel source"
                ))
            })?;
            for (o, &q) in out.iter_mut().zip(self.row(row)) {
                *o += w * q * vol;
            }
        }
        let mass: f64 = out.iter().sum();
        let target = mu.mass();
        if (mass - target).abs() > 1e-10 * target.max(1.0) {
            return Err(Error::Numerical {
                what: "push-forward mass conservation",
                detail: format!("output mass {mass} vs input {target}"),
                value: mass - target,
            });
        }
        if mu.is_sigma_finite() {
            GridMeasure::new_sigma_finite(self.grid.clone(), out)
        } else {
            // rescale away the rectangle-rule roundoff so the constructor's
            // strict normalization check stays meaningful
            for o in &mut out {
                *o /= mass;
            }
            GridMeasure::new(self.grid.clone(), out)
        }
    }
}

fn check_source_nodes(grid: &Grid, source_nodes: &[usize]) -> Result<()> {
    if source_nodes.is_empty() {
        return Err(Error::InvalidSpec("kernel needs at least one source node".into()));
    }
    for &s in source_nodes {
        if s >= grid.len() {
            return Err(Error::GridMismatch(format!(
                "source node {s} out of range for grid with {} nodes",
                grid.len()
            )));
        }
    }
    Ok(())
}

/// Options for the Monte Carlo kernel estimator.
#[derive(Debug, Clone)]
pub struct McKernelOptions {
    pub n_paths: usize,
    pub dt: f64,
    /// Mollifier width; defaults to twice the largest grid spacing.
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub blow_up_norm: f64,
}

impl McKernelOptions {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        Self { n_paths, dt, epsilon: None, seed, blow_up_norm: DEFAULT_BLOW_UP_NORM }
    }
}

/// Monte Carlo transition-kernel estimate on a lattice: Euler-Maruyama paths
/// from every source node, mollified at the terminal time,
/// `q(s, x_i, t, z_j) ~ mean_p phi_eps(x_t^(i,p) - z_j)`. Each `(source,
/// path)` pair owns a counter-derived RNG stream, so results are
/// bit-identical for a fixed seed regardless of threading.
pub fn mc_kernel(
    spec: &ChainSpec,
    s: f64,
    source_nodes: &[usize],
    t: f64,
    grid: Arc<Grid>,
    opts: &McKernelOptions,
) -> Result<GridKernel> {
    if !(s >= 0.0 && t > s) {
        return Err(Error::InvalidSpec(format!("mc_kernel needs 0 <= s < t, got s={s}, t={t}")));
    }
    if grid.dim() != spec.dim() {
        return Err(Error::GridMismatch(format!(
            "grid dim {} vs chain dim {}",
            grid.dim(),
            spec.dim()
        )));
    }
    check_source_nodes(&grid, source_nodes)?;
    if opts.n_paths == 0 || !(opts.dt > 0.0) {
        return Err(Error::InvalidSpec("need n_paths >= 1 and dt > 0".into()));
    }
    let epsilon = opts.epsilon.unwrap_or(2.0 * grid.max_spacing());
    if !(epsilon > 0.0) {
        return Err(Error::InvalidSpec(format!("mollifier width must be positive, got {epsilon}")));
    }

    let n_steps = ((t - s) / opts.dt).round().max(1.0) as usize;
    let dt = (t - s) / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let d = spec.d();
    let nd = spec.dim();
    let n_nodes = grid.len();

    const BATCH: usize = 2048;
    let n_batches = opts.n_paths.div_ceil(BATCH);

    let mut rows = Vec::with_capacity(source_nodes.len());
    for (i, &src) in source_nodes.iter().enumerate() {
        let x0 = grid.node(src);
        let batch_accs: Vec<Vec<f64>> = par::try_map_indexed(n_batches, |b| {
            let lo = b * BATCH;
            let hi = ((b + 1) * BATCH).min(opts.n_paths);
            let mut acc = vec![0.0; n_nodes];
            let mut x = DVector::zeros(nd);
            let mut dw = DVector::zeros(d);
            for p in lo..hi {
                let mut rng = stream_rng(opts.seed, StreamDomain::Kernel, i as u64, p as u64);
                x.copy_from(&x0);
                let mut time = s;
                for _ in 0..n_steps {
                    for z in dw.iter_mut() {
                        *z = rng.sample::<f64, _>(rand_distr::StandardNormal) * sqrt_dt;
                    }
                    let m = spec.drift(time, &x);
                    let noise = spec.sigma(time, &x) * &dw;
                    x.axpy(dt, &m, 1.0);
                    for k in 0..d {
                        x[k] += noise[k];
                    }
                    time += dt;
                    let norm = x.norm();
                    if !norm.is_finite() || norm > opts.blow_up_norm {
                        return Err(Error::TrajectoryBlowUp { path: p, t: time, x_norm: norm });
                    }
                }
                accumulate_mollifier(&grid, x.as_slice(), epsilon, &mut acc);
            }
            Ok(acc)
        })?;
        // fixed-order reduction keeps the result independent of scheduling
        let mut acc = vec![0.0; n_nodes];
        for batch in batch_accs {
            for (a, v) in acc.iter_mut().zip(batch) {
                *a += v;
            }
        }
        let log_norm = -0.5 * nd as f64 * (linalg::LN_2PI + 2.0 * epsilon.ln());
        let scale = log_norm.exp() / opts.n_paths as f64;
        for a in &mut acc {
            *a *= scale;
        }
        rows.push(acc);
    }

    GridKernel::assemble(
        grid,
        source_nodes.to_vec(),
        rows,
        s,
        t,
        KernelProvenance::MonteCarlo { n_paths: opts.n_paths, dt, epsilon, seed: opts.seed },
    )
}

/// Adds `exp(-|y - node|^2 / (2 eps^2))` to every grid node within the
/// mollifier window around `y` (un-normalized; the caller scales once).
fn accumulate_mollifier(grid: &Grid, y: &[f64], eps: f64, acc: &mut [f64]) {
    let radius = MOLLIFIER_WINDOW_SIGMAS * eps;
    let dim = grid.dim();
    let axes = grid.axes();
    let mut lo = Vec::with_capacity(dim);
    let mut hi = Vec::with_capacity(dim);
    for (k, ax) in axes.iter().enumerate() {
        let h = ax.spacing();
        let l = ((y[k] - radius - ax.min) / h).ceil().max(0.0) as usize;
        let u_raw = ((y[k] + radius - ax.min) / h).floor();
        if u_raw < l as f64 {
            return; // window missed the lattice on axis k
        }
        let u = (u_raw as usize).min(ax.n - 1);
        if l > u {
            return;
        }
        lo.push(l);
        hi.push(u);
    }
    let inv_two_eps2 = 1.0 / (2.0 * eps * eps);
    // iterate the window without recursion: odometer over the axes
    let mut idx = lo.clone();
    'outer: loop {
        let mut d2 = 0.0;
        for k in 0..dim {
            let delta = y[k] - axes[k].node(idx[k]);
            d2 += delta * delta;
        }
        acc[grid.flat_index(&idx)] += (-d2 * inv_two_eps2).exp();
        // advance odometer, last axis fastest
        for k in (0..dim).rev() {
            if idx[k] < hi[k] {
                idx[k] += 1;
                continue 'outer;
            }
            idx[k] = lo[k];
        }
        break;
    }
}

/// Feynman-Kac functional of the killed chain,
/// `E_{s,x}[ g(x_t) exp(-int_s^t kappa(r, x_r) dr) ]`, by Monte Carlo.
/// The killing rate must be nonnegative.
pub fn killed_kernel_mc(
    spec: &ChainSpec,
    s: f64,
    x0: &DVector<f64>,
    t: f64,
    kappa: &(dyn Fn(f64, &DVector<f64>) -> f64 + Sync),
    g: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    opts: &McKernelOptions,
) -> Result<Estimate> {
    if !(s >= 0.0 && t > s) {
        return Err(Error::InvalidSpec(format!("need 0 <= s < t, got s={s}, t={t}")));
    }
    if x0.len() != spec.dim() {
        return Err(Error::InvalidSpec("initial state dimension mismatch".into()));
    }
    let n_steps = ((t - s) / opts.dt).round().max(1.0) as usize;
    let dt = (t - s) / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let d = spec.d();

    let weights: Vec<f64> = par::try_map_indexed(opts.n_paths, |p| {
        let mut rng = stream_rng(opts.seed, StreamDomain::Killed, 0, p as u64);
        let mut x = x0.clone();
        let mut dw = DVector::zeros(d);
        let mut time = s;
        let mut integral = 0.0;
        for _ in 0..n_steps {
            let rate = kappa(time, &x);
            if rate < 0.0 || !rate.is_finite() {
                return Err(Error::EvaluatorFailure {
                    what: "killing rate must be finite and nonnegative",
                    t: time,
                    x_norm: x.norm(),
                });
            }
            integral += rate * dt;
            for z in dw.iter_mut() {
                *z = rng.sample::<f64, _>(rand_distr::StandardNormal) * sqrt_dt;
            }
            let m = spec.drift(time, &x);
            let noise = spec.sigma(time, &x) * &dw;
            x.axpy(dt, &m, 1.0);
            for k in 0..d {
                x[k] += noise[k];
            }
            time += dt;
            let norm = x.norm();
            if !norm.is_finite() || norm > opts.blow_up_norm {
                return Err(Error::TrajectoryBlowUp { path: p, t: time, x_norm: norm });
            }
        }
        Ok((-integral).exp() * g(&x))
    })?;
    Ok(mean_stderr(&weights))
}
