//! Doob h-transforms: terminal-data fields, optimal controls, and controlled
//! simulation.
//!
//! Given terminal data `g >= 0` on states, the space-time field
//!
//! ```text
//! h(t, x) = E_{t,x}[ g(x_T) ] = integral q(t, x, T, z) g(z) dz
//! ```
//!
//! solves the backward equation `dh/dt + L h = 0` and induces the drift
//! correction `u*(t, x) = a(t, x) D_{x^1} log h(t, x)` acting on the first
//! block only. The controlled dynamics
//!
//! ```text
//! dx = (M(t, x) + G u) dt + G sigma dW
//! ```
//!
//! are simulated by Euler-Maruyama with per-path accumulators for the control
//! energy `integral 1/2 |sigma^-1 u|^2 dt` and the Girsanov log-weight
//! `integral (sigma^-1 u) . dW - 1/2 |sigma^-1 u|^2 dt`, evaluated with the
//! same Gaussian increments that drive the state. The module also exposes the
//! transformed transition density `q^h = q h(t, y) / h(s, x)`, the martingale
//! diagnostics of `z_t = h(t, x_t) / h(0, x_0)` under the uncontrolled law,
//! and the value function `J = -log h` together with its
//! Hamilton-Jacobi-Bellman residual
//!
//! ```text
//! dJ/dt + L J - 1/2 a D_{x^1}J . D_{x^1}J  =  0 .
//! ```
//!
//! Three concrete field representations are provided:
//!
//! * a closed-form quadratic-exponent family (terminal data
//!   `g(y) = exp(c + s0 . y - 1/2 y' S y)`, e.g. Gaussian density ratios),
//!   integrated in closed form against the Gaussian kernel of a linear chain;
//! * lattice mixtures `h(t, x) = sum_j m_j N(z_j; Phi(t,T) x, Sigma(t,T) +
//!   eps^2 I)` for terminal point masses `m_j` smoothed at the cell scale;
//! * grid-interpolated log-h time slices computed by backward induction with
//!   Gauss-Hermite quadrature and log-domain Catmull-Rom interpolation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::chain::{apply_generator, embedding_matrix, ChainSpec, LinearChainSpec};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::{GaussianKernel, GridKernel, DEFAULT_BLOW_UP_NORM};
use crate::measure::{GaussianMeasure, GridMeasure};
use crate::rng::{stream_rng, StreamDomain};
use crate::stats::{mean_stderr, sample_mean_cov, Estimate};
use crate::{linalg, par};

/// Default bound on `|u*|`; near `t = T` the exact control of a pinned bridge
/// blows up, so saturation events are counted rather than hidden.
pub const DEFAULT_CONTROL_CAP: f64 = 1e6;

/// Hard ceiling on the number of f64 values a simulation may store.
pub const MAX_STORED_VALUES: usize = 100_000_000;

/// Ceiling on tensorized Gauss-Hermite taps in grid-mode backward induction.
pub const MAX_QUADRATURE_TAPS: usize = 4096;

/// Largest state dimension supported by the grid-interpolated field.
pub const MAX_GRID_FIELD_DIM: usize = 6;

/// Slack accepted when matching times against slice/kernel endpoints.
const TIME_MATCH_TOL: f64 = 1e-9;

/// A slice is rejected when `eig_min(Sigma^1/2 S Sigma^1/2)` drops to -1,
/// the boundary at which the defining integral stops converging.
const INTEGRABILITY_MARGIN: f64 = 1e-10;

fn check_time(t: f64, horizon: f64) -> Result<f64> {
    if !t.is_finite() || t < -TIME_MATCH_TOL || t > horizon + TIME_MATCH_TOL {
        return Err(Error::InvalidSpec(format!(
            "time {t} lies outside the horizon [0, {horizon}]"
        )));
    }
    Ok(t.clamp(0.0, horizon))
}

/// Solve `L y = v` in place for a lower-triangular Cholesky factor.
fn forward_substitute(l: &DMatrix<f64>, v: &mut [f64]) {
    let k = l.nrows();
    for i in 0..k {
        let mut s = v[i];
        for j in 0..i {
            s -= l[(i, j)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
}

/// Solve `L L' y = v` in place (forward then backward substitution).
fn cholesky_solve_in_place(l: &DMatrix<f64>, v: &mut [f64]) {
    forward_substitute(l, v);
    let k = l.nrows();
    for i in (0..k).rev() {
        let mut s = v[i];
        for j in (i + 1)..k {
            s -= l[(j, i)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
}

// ---------------------------------------------------------------------------
// Quadratic-exponent slices and the closed-form Gaussian field
// ---------------------------------------------------------------------------

/// One time slice of an analytic field in log-domain:
/// `log h(t, x) = c0 + lin . x + 1/2 x' quad x` with `quad` symmetric.
#[derive(Debug, Clone)]
pub struct QuadraticSlice {
    pub c0: f64,
    pub lin: DVector<f64>,
    pub quad: DMatrix<f64>,
}

impl QuadraticSlice {
    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn log_h(&self, x: &DVector<f64>) -> f64 {
        self.c0 + self.lin.dot(x) + 0.5 * x.dot(&(&self.quad * x))
    }

    /// Full-state gradient of `log h`.
    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.lin + &self.quad * x
    }
}

/// Closed-form field for a linear chain and quadratic-exponent terminal data
/// `g(y) = exp(c + s0 . y - 1/2 y' S y)`.
///
/// With `Phi = Phi(t, T)`, `Sigma = Sigma(t, T)` and the resolvents
/// `M1 = I + Sigma S`, `M2 = I + S Sigma = M1'`, the Gaussian integral of `g`
/// against the transition kernel gives the exact quadratic slice
///
/// ```text
/// log h(t, x) = c - 1/2 log det M1 + 1/2 (Sigma s0) . (M2^-1 s0)
///             + (Phi' M2^-1 s0) . x - 1/2 x' Phi' sym(M2^-1 S) Phi x ,
/// ```
///
/// which degenerates gracefully to the terminal exponent at `t = T`.
#[derive(Debug, Clone)]
pub struct GaussianRatioField {
    a_matrix: DMatrix<f64>,
    noise: DMatrix<f64>,
    horizon: f64,
    d: usize,
    s_mat: DMatrix<f64>,
    s_vec: DVector<f64>,
    log_c: f64,
}

impl GaussianRatioField {
    /// Field from explicit terminal exponent data on the chain `spec`.
    pub fn new(
        spec: &LinearChainSpec,
        s_mat: DMatrix<f64>,
        s_vec: DVector<f64>,
        log_c: f64,
    ) -> Result<Self> {
        let nd = spec.dim();
        if s_mat.nrows() != nd || s_mat.ncols() != nd || s_vec.len() != nd {
            return Err(Error::InvalidSpec(format!(
                "terminal exponent dimensions ({}x{}, {}) do not match the chain dimension {nd}",
                s_mat.nrows(),
                s_mat.ncols(),
                s_vec.len()
            )));
        }
        let asym = (&s_mat - s_mat.transpose()).norm();
        if asym > 1e-8 * (1.0 + s_mat.norm()) {
            return Err(Error::InvalidSpec(format!(
                "terminal quadratic form must be symmetric (asymmetry {asym:e})"
            )));
        }
        if !log_c.is_finite() {
            return Err(Error::InvalidSpec("terminal log-normalization must be finite".into()));
        }
        let g = embedding_matrix(spec.n(), spec.d());
        let a0 = spec.sigma0() * spec.sigma0().transpose();
        let noise = &g * a0 * g.transpose();
        Ok(Self {
            a_matrix: spec.a_matrix().clone(),
            noise,
            horizon: spec.horizon(),
            d: spec.d(),
            s_mat: linalg::symmetrized(&s_mat),
            s_vec,
            log_c,
        })
    }

    pub fn dim(&self) -> usize {
        self.s_vec.len()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Exact quadratic slice of `log h` at time `t`.
    pub fn slice(&self, t: f64) -> Result<QuadraticSlice> {
        let t = check_time(t, self.horizon)?;
        let tau = self.horizon - t;
        let k = self.dim();
        let (phi, sigma) = linalg::transition_and_gramian(&self.a_matrix, &self.noise, tau);

        // Integrability: the terminal exponent must not outgrow the kernel,
        // i.e. eig_min(Sigma^1/2 S Sigma^1/2) > -1.
        let eig = sigma.clone().symmetric_eigen();
        let mut sqrt_sigma = eig.eigenvectors.clone();
        for (c, lam) in eig.eigenvalues.iter().enumerate() {
            let s = lam.max(0.0).sqrt();
            sqrt_sigma.column_mut(c).scale_mut(s);
        }
        let sqrt_sigma = &sqrt_sigma * eig.eigenvectors.transpose();
        let pencil = linalg::symmetrized(&(&sqrt_sigma * &self.s_mat * &sqrt_sigma));
        let (lo, _) = linalg::symmetric_eig_range(&pencil);
        if lo <= -1.0 + INTEGRABILITY_MARGIN {
            return Err(Error::Numerical {
                what: "h-field time slice",
                detail: format!(
                    "terminal data is not integrable against the transition law at t={t}"
                ),
                value: lo,
            });
        }

        let m2 = DMatrix::identity(k, k) + &self.s_mat * &sigma;
        let lu = m2.lu();
        let det = lu.determinant();
        if !(det.is_finite() && det > 0.0) {
            return Err(Error::Numerical {
                what: "h-field time slice",
                detail: format!("resolvent I + S Sigma is singular at t={t}"),
                value: det,
            });
        }
        let a_sol = lu.solve(&self.s_mat).ok_or(Error::Numerical {
            what: "h-field time slice",
            detail: "resolvent solve failed".into(),
            value: det,
        })?;
        let a_sym = linalg::symmetrized(&a_sol);
        let b = lu.solve(&self.s_vec).ok_or(Error::Numerical {
            what: "h-field time slice",
            detail: "resolvent solve failed".into(),
            value: det,
        })?;
        let quad = linalg::symmetrized(&(-(phi.transpose() * &a_sym * &phi)));
        let lin = phi.transpose() * &b;
        let c0 = self.log_c - 0.5 * det.ln() + 0.5 * (&sigma * &self.s_vec).dot(&b);
        Ok(QuadraticSlice { c0, lin, quad })
    }
}

// ---------------------------------------------------------------------------
// Lattice mixtures
// ---------------------------------------------------------------------------

/// Field built from terminal point masses on a lattice, smoothed at scale
/// `eps`: `h(t, x) = sum_j m_j N(z_j; Phi(t,T) x, Sigma(t,T) + eps^2 I)`.
///
/// The smoothing makes the mixture the exact field of the terminal data
/// `g = sum_j m_j N(.; z_j, eps^2 I)`, so the tower property holds exactly;
/// `eps` defaults to `max_spacing / sqrt(12)`, the standard deviation of a
/// uniform density over one cell.
#[derive(Debug, Clone)]
pub struct MixtureField {
    a_matrix: DMatrix<f64>,
    noise: DMatrix<f64>,
    horizon: f64,
    d: usize,
    grid: Arc<Grid>,
    log_mass: Vec<f64>,
    active: Vec<usize>,
    nodes: Vec<f64>,
    smoothing: f64,
}

struct MixturePrepared<'a> {
    field: &'a MixtureField,
    phi: DMatrix<f64>,
    l_factor: DMatrix<f64>,
    log_norm: f64,
}

impl MixtureField {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Grid indices carrying nonzero terminal mass.
    pub fn active_nodes(&self) -> &[usize] {
        &self.active
    }

    pub fn log_masses(&self) -> &[f64] {
        &self.log_mass
    }

    fn prepared(&self, t: f64) -> Result<MixturePrepared<'_>> {
        let t = check_time(t, self.horizon)?;
        let tau = self.horizon - t;
        let (phi, sigma) = linalg::transition_and_gramian(&self.a_matrix, &self.noise, tau);
        let k = self.grid.dim();
        let cov = sigma + DMatrix::identity(k, k) * self.smoothing.powi(2);
        let chol = linalg::checked_cholesky(&cov, "mixture slice covariance")?;
        let l_factor = chol.l();
        let log_norm =
            -0.5 * k as f64 * linalg::LN_2PI - (0..k).map(|i| l_factor[(i, i)].ln()).sum::<f64>();
        Ok(MixturePrepared { field: self, phi, l_factor, log_norm })
    }

    /// Posterior over terminal components given a start state `x0`, i.e.
    /// `pi_j(x0) ~ m_j N(z_j; Phi(0,T) x0, Sigma(0,T) + eps^2 I)`, returned
    /// as normalized log-weights over all grid nodes (`-inf` off support).
    pub fn component_log_posterior(&self, x0: &DVector<f64>) -> Result<Vec<f64>> {
        let prep = self.prepared(0.0)?;
        let terms = prep.log_terms(x0)?;
        let total = linalg::log_sum_exp(&terms);
        if !total.is_finite() {
            return Err(Error::Numerical {
                what: "mixture posterior",
                detail: "all terminal components underflowed at the start state".into(),
                value: total,
            });
        }
        let mut out = vec![f64::NEG_INFINITY; self.grid.len()];
        for (i, &j) in self.active.iter().enumerate() {
            out[j] = terms[i] - total;
        }
        Ok(out)
    }

    /// The likelihood field of one terminal component: terminal data
    /// `g_j(y) = N(z_j; y, eps^2 I)`, whose field is exactly
    /// `h_j(t, x) = N(z_j; Phi(t,T) x, Sigma(t,T) + eps^2 I)`.
    ///
    /// The full mixture decomposes as `h = sum_j m_j h_j`, and the
    /// h-transformed path law as the `pi_j(x0)`-mixture of the component
    /// bridges, which is what makes component-wise simulation exact.
    pub fn component_field(&self, node: usize) -> Result<GaussianRatioField> {
        if node >= self.grid.len() {
            return Err(Error::InvalidSpec(format!(
                "component {node} outside the lattice of {} nodes",
                self.grid.len()
            )));
        }
        if !self.log_mass[node].is_finite() {
            return Err(Error::InvalidSpec(format!("component {node} carries no terminal mass")));
        }
        let k = self.grid.dim();
        let z = self.grid.node(node);
        let e2 = self.smoothing.powi(2);
        let s_mat = DMatrix::identity(k, k) / e2;
        let s_vec = &z / e2;
        let log_c = -0.5 * k as f64 * (linalg::LN_2PI + e2.ln()) - z.norm_squared() / (2.0 * e2);
        Ok(GaussianRatioField {
            a_matrix: self.a_matrix.clone(),
            noise: self.noise.clone(),
            horizon: self.horizon,
            d: self.d,
            s_mat,
            s_vec,
            log_c,
        })
    }
}

/// Per-step affine-control data shared by all components of a mixture.
///
/// Every component's log-field is quadratic with the same Hessian (the
/// likelihood exponent `S = I/eps^2` is component-independent), so the
/// feedback gain `K` is shared and only the intercept depends on the
/// component node: `u_c(t_k, x) = K_k x + P_k z_c`.
#[derive(Debug, Clone)]
pub struct MixtureScheduleBasis {
    k_mats: Vec<DMatrix<f64>>,
    p_mats: Vec<DMatrix<f64>>,
}

impl MixtureScheduleBasis {
    pub fn n_steps(&self) -> usize {
        self.k_mats.len()
    }

    /// Assembles the affine schedule of the component at terminal node `z`.
    pub fn component_schedule(&self, z: &DVector<f64>) -> Vec<AffineStep> {
        self.k_mats
            .iter()
            .zip(&self.p_mats)
            .map(|(k, p)| AffineStep { k_mat: k.clone(), k_vec: p * z })
            .collect()
    }
}

impl MixtureField {
    /// Precomputes the shared schedule basis on the simulation grid `times`
    /// (left endpoints, one step per interval).
    pub fn schedule_basis(&self, spec: &ChainSpec, times: &[f64]) -> Result<MixtureScheduleBasis> {
        if times.len() < 2 {
            return Err(Error::InvalidSpec("schedule needs at least one step".into()));
        }
        let sigma = spec.constant_sigma().ok_or_else(|| {
            Error::InvalidSpec("affine control schedules need a constant-sigma chain".into())
        })?;
        let a = sigma * sigma.transpose();
        let d = spec.d();
        let nd = self.grid.dim();
        if spec.dim() != nd {
            return Err(Error::InvalidSpec(format!(
                "field has dim {nd}, spec has {}",
                spec.dim()
            )));
        }
        let e2 = self.smoothing.powi(2);
        let identity = DMatrix::identity(nd, nd);
        let mut k_mats = Vec::with_capacity(times.len() - 1);
        let mut p_mats = Vec::with_capacity(times.len() - 1);
        for &t in &times[..times.len() - 1] {
            let t = check_time(t, self.horizon)?;
            let (phi, sigma_t) =
                linalg::transition_and_gramian(&self.a_matrix, &self.noise, self.horizon - t);
            let m2 = &identity + &sigma_t / e2;
            let lu = m2.lu();
            let m2_inv = lu.try_inverse().ok_or(Error::Numerical {
                what: "mixture schedule basis",
                detail: format!("resolvent is singular at t={t}"),
                value: 0.0,
            })?;
            let a_sym = linalg::symmetrized(&(&m2_inv / e2));
            let quad1 = -(phi.transpose() * &a_sym * &phi).rows(0, d).into_owned();
            let lin1 = (phi.transpose() * &m2_inv / e2).rows(0, d).into_owned();
            k_mats.push(&a * quad1);
            p_mats.push(&a * lin1);
        }
        Ok(MixtureScheduleBasis { k_mats, p_mats })
    }

    /// A control evaluator reusing per-step prepared slices, for direct
    /// simulation under the full mixture control. `times` must be the
    /// simulation grid; queries snap to the nearest left endpoint.
    pub fn control_on_grid<'a>(
        &'a self,
        spec: &ChainSpec,
        times: &[f64],
    ) -> Result<impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Sync + 'a> {
        if times.len() < 2 {
            return Err(Error::InvalidSpec("control grid needs at least one step".into()));
        }
        let sigma = spec.constant_sigma().ok_or_else(|| {
            Error::InvalidSpec("the prepared mixture control needs a constant-sigma chain".into())
        })?;
        let a = sigma * sigma.transpose();
        let d = spec.d();
        let t0 = times[0];
        let dt = (times[times.len() - 1] - t0) / (times.len() - 1) as f64;
        let prepared: Vec<MixturePrepared<'a>> = times[..times.len() - 1]
            .iter()
            .map(|&t| self.prepared(t))
            .collect::<Result<_>>()?;
        Ok(move |t: f64, x: &DVector<f64>| {
            let k = (((t - t0) / dt).round() as usize).min(prepared.len() - 1);
            let grad = prepared[k].grad(x)?;
            Ok(&a * grad.rows(0, d))
        })
    }
}

impl MixturePrepared<'_> {
    /// Log of each active component's contribution at state `x`.
    fn log_terms(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let k = self.field.grid.dim();
        if x.len() != k {
            return Err(Error::InvalidSpec(format!(
                "state has dim {}, mixture lattice has dim {k}",
                x.len()
            )));
        }
        let mean = &self.phi * x;
        let mut buf = vec![0.0; k];
        let mut out = Vec::with_capacity(self.field.active.len());
        for (i, &j) in self.field.active.iter().enumerate() {
            for c in 0..k {
                buf[c] = self.field.nodes[i * k + c] - mean[c];
            }
            forward_substitute(&self.l_factor, &mut buf);
            let quad: f64 = buf.iter().map(|v| v * v).sum();
            out.push(self.field.log_mass[j] + self.log_norm - 0.5 * quad);
        }
        Ok(out)
    }

    fn log_h(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(linalg::log_sum_exp(&self.log_terms(x)?))
    }

    /// Full-state gradient `Phi' C^-1 (zbar - Phi x)` with the softmax mean
    /// `zbar = sum_j p_j(x) z_j`.
    fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let terms = self.log_terms(x)?;
        let total = linalg::log_sum_exp(&terms);
        if !total.is_finite() {
            return Err(Error::Numerical {
                what: "mixture gradient",
                detail: "all components underflowed".into(),
                value: total,
            });
        }
        let k = self.field.grid.dim();
        let mut zbar = vec![0.0; k];
        for (i, term) in terms.iter().enumerate() {
            let p = (term - total).exp();
            for c in 0..k {
                zbar[c] += p * self.field.nodes[i * k + c];
            }
        }
        let mean = &self.phi * x;
        let mut r = vec![0.0; k];
        for c in 0..k {
            r[c] = zbar[c] - mean[c];
        }
        cholesky_solve_in_place(&self.l_factor, &mut r);
        Ok(self.phi.transpose() * DVector::from_vec(r))
    }
}

// ---------------------------------------------------------------------------
// Grid-interpolated field
// ---------------------------------------------------------------------------

/// Log-h time slices on a lattice, built by backward induction and queried by
/// log-domain Catmull-Rom interpolation in space and linear interpolation in
/// time. The first-block gradient is precomputed per slice by central
/// differences on the log-h lattice (one-sided at the boundary).
#[derive(Debug, Clone)]
pub struct GridField {
    grid: Arc<Grid>,
    times: Vec<f64>,
    log_h: Vec<Vec<f64>>,
    grad1: Vec<Vec<f64>>,
    d: usize,
}

/// Tensor Catmull-Rom interpolation of lattice `values` at `y`, coordinates
/// clamped into the box; exact for quadratic polynomials away from the edge.
fn interp_log_lattice(grid: &Grid, values: &[f64], y: &DVector<f64>) -> f64 {
    let k = grid.dim();
    let strides = grid.strides();
    let axes = grid.axes();
    let mut tap_idx = [[0usize; 4]; MAX_GRID_FIELD_DIM];
    let mut tap_w = [[0f64; 4]; MAX_GRID_FIELD_DIM];
    for (ax, axis) in axes.iter().enumerate() {
        let span = (axis.n - 1) as f64;
        let pos = ((y[ax] - axis.min) / axis.spacing()).clamp(0.0, span);
        let cell = (pos.floor() as usize).min(axis.n - 2);
        let w = linalg::catmull_rom_weights(pos - cell as f64);
        for o in 0..4 {
            let raw = cell as isize - 1 + o as isize;
            tap_idx[ax][o] = raw.clamp(0, (axis.n - 1) as isize) as usize;
            tap_w[ax][o] = w[o];
        }
    }
    let mut acc = 0.0;
    for combo in 0..(1usize << (2 * k)) {
        let mut rest = combo;
        let mut w = 1.0;
        let mut flat = 0;
        for ax in 0..k {
            let o = rest & 3;
            rest >>= 2;
            w *= tap_w[ax][o];
            flat += strides[ax] * tap_idx[ax][o];
        }
        acc += w * values[flat];
    }
    acc
}

/// Multilinear interpolation of a per-node vector lattice (`width` components
/// per node) at `y`, coordinates clamped into the box.
fn interp_vector_lattice(
    grid: &Grid,
    values: &[f64],
    width: usize,
    y: &DVector<f64>,
    out: &mut [f64],
) {
    let k = grid.dim();
    let strides = grid.strides();
    let axes = grid.axes();
    let mut lo = [0usize; MAX_GRID_FIELD_DIM];
    let mut frac = [0f64; MAX_GRID_FIELD_DIM];
    for (ax, axis) in axes.iter().enumerate() {
        let span = (axis.n - 1) as f64;
        let pos = ((y[ax] - axis.min) / axis.spacing()).clamp(0.0, span);
        let cell = (pos.floor() as usize).min(axis.n - 2);
        lo[ax] = cell;
        frac[ax] = pos - cell as f64;
    }
    out.fill(0.0);
    for combo in 0..(1usize << k) {
        let mut w = 1.0;
        let mut flat = 0;
        for ax in 0..k {
            let hi = (combo >> ax) & 1;
            w *= if hi == 1 { frac[ax] } else { 1.0 - frac[ax] };
            flat += strides[ax] * (lo[ax] + hi);
        }
        for c in 0..width {
            out[c] += w * values[flat * width + c];
        }
    }
}

/// Central differences of a log-h lattice along the first `d` axes,
/// one-sided at the boundary; exact for quadratic log-densities away from
/// the edge because the tangents of a quadratic are linear.
fn grad1_lattice(grid: &Grid, values: &[f64], d: usize) -> Vec<f64> {
    let strides = grid.strides();
    let axes = grid.axes();
    par::map_indexed(grid.len(), |i| {
        let multi = grid.multi_index(i);
        let mut out = vec![0.0; d];
        for (r, g) in out.iter_mut().enumerate() {
            let h = axes[r].spacing();
            let s = strides[r];
            let ir = multi[r];
            *g = if ir == 0 {
                (values[i + s] - values[i]) / h
            } else if ir == axes[r].n - 1 {
                (values[i] - values[i - s]) / h
            } else {
                (values[i + s] - values[i - s]) / (2.0 * h)
            };
        }
        out
    })
    .into_iter()
    .flatten()
    .collect()
}

impl GridField {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn slice_times(&self) -> &[f64] {
        &self.times
    }

    /// Stored log-h values of slice `k`.
    pub fn slice_values(&self, k: usize) -> &[f64] {
        &self.log_h[k]
    }

    /// Bracketing slice indices and the linear weight of the upper one.
    fn bracket(&self, t: f64) -> Result<(usize, usize, f64)> {
        let horizon = *self.times.last().expect("grid field has slices");
        let t = check_time(t, horizon)?;
        let dt = horizon / (self.times.len() - 1) as f64;
        let pos = (t / dt).clamp(0.0, (self.times.len() - 1) as f64);
        let lo = (pos.floor() as usize).min(self.times.len() - 2);
        let w = pos - lo as f64;
        if w.abs() < TIME_MATCH_TOL {
            Ok((lo, lo, 0.0))
        } else if (1.0 - w).abs() < TIME_MATCH_TOL {
            Ok((lo + 1, lo + 1, 0.0))
        } else {
            Ok((lo, lo + 1, w))
        }
    }

    fn check_inside(&self, t: f64, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.grid.dim() {
            return Err(Error::InvalidSpec(format!(
                "state has dim {}, grid field has dim {}",
                x.len(),
                self.grid.dim()
            )));
        }
        if !self.grid.contains(x) {
            return Err(Error::PreconditionViolated(format!(
                "extrapolation outside the grid bounding box at t={t}, |x|={:.3e}",
                x.norm()
            )));
        }
        Ok(())
    }

    fn log_h(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        self.check_inside(t, x)?;
        let (lo, hi, w) = self.bracket(t)?;
        let v = interp_log_lattice(&self.grid, &self.log_h[lo], x);
        if hi == lo {
            Ok(v)
        } else {
            Ok((1.0 - w) * v + w * interp_log_lattice(&self.grid, &self.log_h[hi], x))
        }
    }

    fn grad1(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_inside(t, x)?;
        let (lo, hi, w) = self.bracket(t)?;
        let mut g = vec![0.0; self.d];
        interp_vector_lattice(&self.grid, &self.grad1[lo], self.d, x, &mut g);
        if hi != lo {
            let mut g2 = vec![0.0; self.d];
            interp_vector_lattice(&self.grid, &self.grad1[hi], self.d, x, &mut g2);
            for (a, b) in g.iter_mut().zip(&g2) {
                *a = (1.0 - w) * *a + w * b;
            }
        }
        Ok(DVector::from_vec(g))
    }
}

// ---------------------------------------------------------------------------
// The field enum
// ---------------------------------------------------------------------------

/// A positive space-time field `h(t, x)` with terminal data at the horizon.
#[derive(Debug, Clone)]
pub enum HField {
    /// `h = 1`: the trivial field of terminal data `g = 1`.
    Constant,
    /// Closed-form quadratic-exponent field on a linear chain.
    GaussianRatio(GaussianRatioField),
    /// Smoothed lattice mixture on a linear chain.
    Mixture(MixtureField),
    /// Grid-interpolated log-h slices.
    Grid(GridField),
}

impl HField {
    /// State dimension, when the representation fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            HField::Constant => None,
            HField::GaussianRatio(f) => Some(f.dim()),
            HField::Mixture(f) => Some(f.grid.dim()),
            HField::Grid(f) => Some(f.grid.dim()),
        }
    }

    pub fn as_gaussian_ratio(&self) -> Option<&GaussianRatioField> {
        match self {
            HField::GaussianRatio(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_mixture(&self) -> Option<&MixtureField> {
        match self {
            HField::Mixture(f) => Some(f),
            _ => None,
        }
    }

    /// `log h(t, x)`.
    pub fn log_h(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        match self {
            HField::Constant => Ok(0.0),
            HField::GaussianRatio(f) => Ok(f.slice(t)?.log_h(x)),
            HField::Mixture(f) => f.prepared(t)?.log_h(x),
            HField::Grid(f) => f.log_h(t, x),
        }
    }

    /// `log h` at one time for a flat batch of states (row-major, `dim`
    /// coordinates per state); the slice is prepared once and evaluation is
    /// parallel over states.
    pub fn log_h_many(&self, t: f64, states: &[f64], dim: usize) -> Result<Vec<f64>> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(Error::InvalidSpec(format!(
                "flat state batch of {} values is not a multiple of dim {dim}",
                states.len()
            )));
        }
        if let Some(k) = self.dim() {
            if k != dim {
                return Err(Error::InvalidSpec(format!(
                    "field has dim {k}, batch claims dim {dim}"
                )));
            }
        }
        let n = states.len() / dim;
        match self {
            HField::Constant => Ok(vec![0.0; n]),
            HField::GaussianRatio(f) => {
                let slice = f.slice(t)?;
                Ok(par::map_indexed(n, |i| {
                    let x = DVector::from_column_slice(&states[i * dim..(i + 1) * dim]);
                    slice.log_h(&x)
                }))
            }
            HField::Mixture(f) => {
                let prep = f.prepared(t)?;
                par::try_map_indexed(n, |i| {
                    let x = DVector::from_column_slice(&states[i * dim..(i + 1) * dim]);
                    prep.log_h(&x)
                })
            }
            HField::Grid(f) => par::try_map_indexed(n, |i| {
                let x = DVector::from_column_slice(&states[i * dim..(i + 1) * dim]);
                f.log_h(t, &x)
            }),
        }
    }

    /// Gradient of `log h` restricted to the first block (`d` components).
    /// The constant field returns an empty vector since it carries no
    /// intrinsic dimension; [`optimal_control`] handles that case.
    pub fn grad1_log_h(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            HField::Constant => Ok(DVector::zeros(0)),
            HField::GaussianRatio(f) => Ok(f.slice(t)?.grad(x).rows(0, f.d).into_owned()),
            HField::Mixture(f) => Ok(f.prepared(t)?.grad(x)?.rows(0, f.d).into_owned()),
            HField::Grid(f) => f.grad1(t, x),
        }
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// The trivial field `h = 1` (terminal data identically one).
pub fn build_h_constant() -> HField {
    HField::Constant
}

/// Field of the terminal density ratio `g = d(target) / d(S_T initial)`,
/// where `S_T initial` is the push-forward of `initial` through the chain's
/// Gaussian kernel on `[0, T]`.
///
/// For a Dirac `initial` at `x0` this gives `h(0, x0) = 1` exactly, so the
/// h-transformed process is the bridge steering `x0` to `target`.
pub fn build_h_gaussian_ratio(
    spec: &LinearChainSpec,
    initial: &GaussianMeasure,
    target: &GaussianMeasure,
) -> Result<HField> {
    let nd = spec.dim();
    if initial.dim() != nd || target.dim() != nd {
        return Err(Error::InvalidSpec(format!(
            "initial/target dimensions ({}, {}) do not match the chain dimension {nd}",
            initial.dim(),
            target.dim()
        )));
    }
    let kernel = crate::kernels::gaussian_kernel(spec, 0.0, spec.horizon())?;
    let reference = kernel.push_forward(initial)?;
    let chol_r = linalg::checked_cholesky(reference.cov(), "reference covariance")?;
    let chol_t = linalg::checked_cholesky(target.cov(), "target covariance")?;

    let identity = DMatrix::identity(nd, nd);
    let r_inv = chol_r.solve(&identity);
    let t_inv = chol_t.solve(&identity);
    let s_mat = &t_inv - &r_inv;
    let s_vec = &t_inv * target.mean() - &r_inv * reference.mean();
    let log_c = 0.5
        * (reference.mean().dot(&(&r_inv * reference.mean()))
            - target.mean().dot(&(&t_inv * target.mean())))
        + 0.5 * (linalg::cholesky_log_det(&chol_r) - linalg::cholesky_log_det(&chol_t));
    Ok(HField::GaussianRatio(GaussianRatioField::new(spec, s_mat, s_vec, log_c)?))
}

/// Mixture field from terminal log point-masses on a lattice.
///
/// `log_masses[j]` is the log of the terminal mass at grid node `j`
/// (`-inf` marks empty nodes; at least one node must carry mass). `smoothing`
/// is the component standard deviation; `None` picks the cell scale
/// `max_spacing / sqrt(12)`.
pub fn build_h_mixture(
    spec: &LinearChainSpec,
    grid: Arc<Grid>,
    log_masses: Vec<f64>,
    smoothing: Option<f64>,
) -> Result<HField> {
    let nd = spec.dim();
    if grid.dim() != nd {
        return Err(Error::GridMismatch(format!(
            "lattice dim {} does not match the chain dimension {nd}",
            grid.dim()
        )));
    }
    if log_masses.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} log-masses for a lattice of {} nodes",
            log_masses.len(),
            grid.len()
        )));
    }
    if log_masses.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::InvalidSpec("terminal log-masses must be finite or -inf".into()));
    }
    let eps = smoothing.unwrap_or(grid.max_spacing() / 12f64.sqrt());
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidSpec(format!("smoothing must be positive, got {eps}")));
    }
    let active: Vec<usize> =
        (0..grid.len()).filter(|&j| log_masses[j].is_finite()).collect();
    if active.is_empty() {
        return Err(Error::InvalidSpec(
            "terminal data is zero on the whole lattice; the field would vanish".into(),
        ));
    }
    let mut nodes = vec![0.0; active.len() * nd];
    for (i, &j) in active.iter().enumerate() {
        grid.node_into(j, &mut nodes[i * nd..(i + 1) * nd]);
    }
    let g = embedding_matrix(spec.n(), spec.d());
    let a0 = spec.sigma0() * spec.sigma0().transpose();
    let noise = &g * a0 * g.transpose();
    Ok(HField::Mixture(MixtureField {
        a_matrix: spec.a_matrix().clone(),
        noise,
        horizon: spec.horizon(),
        d: spec.d(),
        grid,
        log_mass: log_masses,
        active,
        nodes,
        smoothing: eps,
    }))
}

/// Grid-interpolated field by backward induction from terminal log-values.
///
/// The one-step kernel of the linear chain is exact (`Phi(dt)`,
/// `Sigma(dt)`); the conditional expectation over each step is evaluated by
/// tensorized Gauss-Hermite quadrature in the step kernel's eigenbasis with
/// Catmull-Rom interpolation of the previous slice in log-domain, which is
/// exact for quadratic log-fields away from the lattice edge.
pub fn build_h_grid(
    spec: &LinearChainSpec,
    grid: Arc<Grid>,
    terminal_log: &[f64],
    n_slices: usize,
    gh_points: usize,
) -> Result<HField> {
    let nd = spec.dim();
    if grid.dim() != nd {
        return Err(Error::GridMismatch(format!(
            "lattice dim {} does not match the chain dimension {nd}",
            grid.dim()
        )));
    }
    if nd > MAX_GRID_FIELD_DIM {
        return Err(Error::SizeGuard {
            what: "grid field dimension",
            requested: nd,
            limit: MAX_GRID_FIELD_DIM,
        });
    }
    if terminal_log.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} terminal values for a lattice of {} nodes",
            terminal_log.len(),
            grid.len()
        )));
    }
    if terminal_log.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpec(
            "grid-mode terminal data must be strictly positive (finite log) on every node".into(),
        ));
    }
    if n_slices < 2 {
        return Err(Error::InvalidSpec("need at least two time slices".into()));
    }
    if grid.axes().iter().any(|a| a.n < 4) {
        return Err(Error::InvalidSpec(
            "grid-mode interpolation needs at least 4 nodes per axis".into(),
        ));
    }
    if gh_points == 0 {
        return Err(Error::InvalidSpec("need at least one quadrature point".into()));
    }
    let n_taps = gh_points
        .checked_pow(nd as u32)
        .filter(|&n| n <= MAX_QUADRATURE_TAPS)
        .ok_or(Error::SizeGuard {
            what: "quadrature taps",
            requested: usize::MAX,
            limit: MAX_QUADRATURE_TAPS,
        })?;

    let horizon = spec.horizon();
    let dt = horizon / (n_slices - 1) as f64;
    let g = embedding_matrix(spec.n(), spec.d());
    let a0 = spec.sigma0() * spec.sigma0().transpose();
    let noise = &g * a0 * g.transpose();
    let (phi, sigma_step) = linalg::transition_and_gramian(spec.a_matrix(), &noise, dt);

    // Step-kernel eigenbasis: offsets L xi with L = V diag(sqrt(lambda)).
    let eig = sigma_step.symmetric_eigen();
    let (gh_nodes, gh_weights) = linalg::gauss_hermite(gh_points)?;
    let mut offsets = vec![0.0; n_taps * nd];
    let mut log_w = vec![0.0; n_taps];
    for tap in 0..n_taps {
        let mut rest = tap;
        for dir in 0..nd {
            let q = rest % gh_points;
            rest /= gh_points;
            log_w[tap] += gh_weights[q].ln();
            let scale = eig.eigenvalues[dir].max(0.0).sqrt() * gh_nodes[q];
            for c in 0..nd {
                offsets[tap * nd + c] += scale * eig.eigenvectors[(c, dir)];
            }
        }
    }

    let mut nodes = vec![0.0; grid.len() * nd];
    for j in 0..grid.len() {
        grid.node_into(j, &mut nodes[j * nd..(j + 1) * nd]);
    }

    let mut slices = vec![Vec::new(); n_slices];
    slices[n_slices - 1] = terminal_log.to_vec();
    for k in (0..n_slices - 1).rev() {
        let prev = std::mem::take(&mut slices[k + 1]);
        let next = par::map_indexed(grid.len(), |j| {
            let x = &nodes[j * nd..(j + 1) * nd];
            let mut mean = vec![0.0; nd];
            for r in 0..nd {
                let mut s = 0.0;
                for c in 0..nd {
                    s += phi[(r, c)] * x[c];
                }
                mean[r] = s;
            }
            let mut terms = Vec::with_capacity(n_taps);
            let mut y = DVector::zeros(nd);
            for tap in 0..n_taps {
                for c in 0..nd {
                    y[c] = mean[c] + offsets[tap * nd + c];
                }
                terms.push(log_w[tap] + interp_log_lattice(&grid, &prev, &y));
            }
            linalg::log_sum_exp(&terms)
        });
        slices[k + 1] = prev;
        slices[k] = next;
    }

    let d = spec.d();
    let grad1 = slices.iter().map(|vals| grad1_lattice(&grid, vals, d)).collect();
    let times = (0..n_slices).map(|k| k as f64 * dt).collect();
    Ok(HField::Grid(GridField { grid, times, log_h: slices, grad1, d }))
}

// ---------------------------------------------------------------------------
// Optimal control
// ---------------------------------------------------------------------------

/// The minimum-energy feedback control `u*(t, x) = a(t, x) D_{x^1} log h`.
pub fn optimal_control(
    h: &HField,
    spec: &ChainSpec,
    t: f64,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = spec.d();
    if x.len() != spec.dim() {
        return Err(Error::InvalidSpec(format!(
            "state has dim {}, spec needs {}",
            x.len(),
            spec.dim()
        )));
    }
    check_time(t, spec.horizon())?;
    if matches!(h, HField::Constant) {
        return Ok(DVector::zeros(d));
    }
    let g1 = h.grad1_log_h(t, x)?;
    if g1.len() != d {
        return Err(Error::InvalidSpec(format!(
            "field gradient has {} components, chain noise dimension is {d}",
            g1.len()
        )));
    }
    Ok(spec.diffusion(t, x) * g1)
}

/// Closure form of [`optimal_control`] for [`Control::Evaluator`].
pub fn optimal_control_fn<'a>(
    h: &'a HField,
    spec: &'a ChainSpec,
) -> impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Sync + 'a {
    move |t, x| optimal_control(h, spec, t, x)
}

/// One step of a precomputed affine control schedule: `u = k_mat x + k_vec`.
#[derive(Debug, Clone)]
pub struct AffineStep {
    pub k_mat: DMatrix<f64>,
    pub k_vec: DVector<f64>,
}

/// Precompute `u*` as an affine schedule on the simulation grid `times`
/// (one step per interval, evaluated at the left endpoint). Only fields with
/// quadratic log-slices admit this form; the chain must have constant sigma.
pub fn affine_control_schedule(
    h: &HField,
    spec: &ChainSpec,
    times: &[f64],
) -> Result<Vec<AffineStep>> {
    if times.len() < 2 {
        return Err(Error::InvalidSpec("schedule needs at least one step".into()));
    }
    let d = spec.d();
    let nd = spec.dim();
    let sigma = spec.constant_sigma().ok_or_else(|| {
        Error::InvalidSpec("affine control schedules need a constant-sigma chain".into())
    })?;
    let a = sigma * sigma.transpose();
    match h {
        HField::Constant => Ok(times[..times.len() - 1]
            .iter()
            .map(|_| AffineStep { k_mat: DMatrix::zeros(d, nd), k_vec: DVector::zeros(d) })
            .collect()),
        HField::GaussianRatio(f) => {
            if f.dim() != nd {
                return Err(Error::InvalidSpec(format!(
                    "field has dim {}, spec needs {nd}",
                    f.dim()
                )));
            }
            times[..times.len() - 1]
                .iter()
                .map(|&t| {
                    let slice = f.slice(t)?;
                    let k_mat = &a * slice.quad.rows(0, d);
                    let k_vec = &a * slice.lin.rows(0, d);
                    Ok(AffineStep { k_mat, k_vec })
                })
                .collect()
        }
        _ => Err(Error::InvalidSpec(
            "affine control schedules require an analytic quadratic field \
             (mixtures decompose into components; grid fields use an evaluator)"
                .into(),
        )),
    }
}

/// Control input for [`simulate_controlled`].
pub type ControlFn<'a> = dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Sync + 'a;

pub enum Control<'a> {
    /// Uncontrolled dynamics; energy and Girsanov log-weight stay exactly 0.
    None,
    /// Arbitrary feedback evaluator `u(t, x)`.
    Evaluator(&'a ControlFn<'a>),
    /// Precomputed affine schedule aligned with the simulation time grid.
    Affine(&'a [AffineStep]),
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Initial state sampler.
pub enum InitialLaw<'a> {
    Gaussian(&'a GaussianMeasure),
    /// Probability measure on a lattice, sampled by inverse CDF.
    Grid(&'a GridMeasure),
    /// Fixed list of start states, assigned round-robin to paths.
    States(&'a [DVector<f64>]),
}

/// Euler-Maruyama options.
#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Requested step; rounded so that an integer number of steps spans the
    /// horizon exactly.
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// RNG stream lane, so that independent batches (e.g. one per mixture
    /// component) can share a seed without overlapping streams.
    pub stream_source: u64,
    /// Times at which states are stored (snapped to the step grid); `None`
    /// stores the initial and terminal states only. Ignored when
    /// `store_full` is set.
    pub checkpoints: Option<Vec<f64>>,
    /// Store every step (and the applied controls).
    pub store_full: bool,
    /// Norm bound on the applied control; saturations are counted per path.
    pub control_cap: f64,
    pub blow_up_norm: f64,
}

impl SimOptions {
    pub fn new(dt: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            dt,
            n_paths,
            seed,
            stream_source: 0,
            checkpoints: None,
            store_full: false,
            control_cap: DEFAULT_CONTROL_CAP,
            blow_up_norm: DEFAULT_BLOW_UP_NORM,
        }
    }

    /// The simulation time grid `0 = t_0 < ... < t_N = horizon`.
    pub fn time_grid(&self, horizon: f64) -> Result<Vec<f64>> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidSpec(format!("step must be positive, got {}", self.dt)));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidSpec(format!("horizon must be positive, got {horizon}")));
        }
        let n_steps = ((horizon / self.dt).round() as usize).max(1);
        let dt = horizon / n_steps as f64;
        Ok((0..=n_steps)
            .map(|k| if k == n_steps { horizon } else { k as f64 * dt })
            .collect())
    }
}

/// Simulated path ensemble: stored states, per-path energy
/// `integral 1/2 |sigma^-1 u|^2 dt` and Girsanov log-weight accumulators,
/// and control-saturation counts.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    times: Vec<f64>,
    states: Vec<f64>,
    controls: Option<Vec<f64>>,
    energy: Vec<f64>,
    girsanov_logw: Vec<f64>,
    saturations: Vec<u64>,
    seed: u64,
    nd: usize,
    d: usize,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.energy.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn dim(&self) -> usize {
        self.nd
    }

    /// Stored times (a subset of the simulation grid).
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn energy(&self) -> &[f64] {
        &self.energy
    }

    pub fn girsanov_logw(&self) -> &[f64] {
        &self.girsanov_logw
    }

    pub fn saturations(&self) -> &[u64] {
        &self.saturations
    }

    pub fn total_saturations(&self) -> u64 {
        self.saturations.iter().sum()
    }

    /// Applied controls, path-major over steps, when the run stored them.
    pub fn controls(&self) -> Option<&[f64]> {
        self.controls.as_deref()
    }

    pub fn state_slice(&self, path: usize, time_index: usize) -> &[f64] {
        let row = path * self.times.len() * self.nd + time_index * self.nd;
        &self.states[row..row + self.nd]
    }

    pub fn state(&self, path: usize, time_index: usize) -> DVector<f64> {
        DVector::from_column_slice(self.state_slice(path, time_index))
    }

    /// Flat `n_paths x nd` block of the states at stored index `time_index`.
    pub fn states_at(&self, time_index: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_paths() * self.nd);
        for p in 0..self.n_paths() {
            out.extend_from_slice(self.state_slice(p, time_index));
        }
        out
    }

    pub fn terminal_flat(&self) -> Vec<f64> {
        self.states_at(self.times.len() - 1)
    }

    /// Concatenate ensembles that share a time grid (e.g. per-component
    /// batches); the seed of the first part is kept.
    pub fn merge(parts: Vec<PathEnsemble>) -> Result<PathEnsemble> {
        let mut iter = parts.into_iter();
        let mut out = iter
            .next()
            .ok_or_else(|| Error::InvalidSpec("cannot merge zero ensembles".into()))?;
        for part in iter {
            if part.times != out.times || part.nd != out.nd || part.d != out.d {
                return Err(Error::GridMismatch(
                    "ensembles with different time grids or dimensions".into(),
                ));
            }
            if part.controls.is_some() != out.controls.is_some() {
                return Err(Error::GridMismatch(
                    "cannot merge ensembles with and without stored controls".into(),
                ));
            }
            out.states.extend_from_slice(&part.states);
            if let (Some(c), Some(pc)) = (out.controls.as_mut(), part.controls.as_ref()) {
                c.extend_from_slice(pc);
            }
            out.energy.extend_from_slice(&part.energy);
            out.girsanov_logw.extend_from_slice(&part.girsanov_logw);
            out.saturations.extend_from_slice(&part.saturations);
        }
        Ok(out)
    }

    /// Per-time summary: mean state, upper-triangular covariance entries, and
    /// the ensemble means of the per-path accumulators (totals over the whole
    /// horizon, repeated on every row).
    pub fn summary_csv(&self) -> String {
        let nd = self.nd;
        let mut header = String::from("time");
        for i in 0..nd {
            header.push_str(&format!(",mean_{i}"));
        }
        for i in 0..nd {
            for j in i..nd {
                header.push_str(&format!(",cov_{i}_{j}"));
            }
        }
        header.push_str(",total_mean_energy,total_mean_girsanov_logw\n");
        let mean_e = self.energy.iter().sum::<f64>() / self.n_paths() as f64;
        let mean_g = self.girsanov_logw.iter().sum::<f64>() / self.n_paths() as f64;
        let mut out = header;
        for ti in 0..self.times.len() {
            let flat = self.states_at(ti);
            let (mean, cov) = sample_mean_cov(&flat, nd);
            out.push_str(&format!("{:.17e}", self.times[ti]));
            for i in 0..nd {
                out.push_str(&format!(",{:.17e}", mean[i]));
            }
            for i in 0..nd {
                for j in i..nd {
                    out.push_str(&format!(",{:.17e}", cov[(i, j)]));
                }
            }
            out.push_str(&format!(",{mean_e:.17e},{mean_g:.17e}\n"));
        }
        out
    }

    /// Full trajectory dump, path-major, behind a size guard.
    pub fn trajectories_csv(&self) -> Result<String> {
        let values = self.states.len() + self.controls.as_ref().map_or(0, |c| c.len());
        if values > MAX_STORED_VALUES / 4 {
            return Err(Error::SizeGuard {
                what: "trajectory CSV",
                requested: values,
                limit: MAX_STORED_VALUES / 4,
            });
        }
        let mut out = String::from("path,time");
        for i in 0..self.nd {
            out.push_str(&format!(",x_{i}"));
        }
        if self.controls.is_some() {
            for r in 0..self.d {
                out.push_str(&format!(",u_{r}"));
            }
        }
        out.push('\n');
        let n_steps = self.times.len().saturating_sub(1);
        for p in 0..self.n_paths() {
            for ti in 0..self.times.len() {
                out.push_str(&format!("{p},{:.17e}", self.times[ti]));
                for v in self.state_slice(p, ti) {
                    out.push_str(&format!(",{v:.17e}"));
                }
                if let Some(controls) = &self.controls {
                    if ti < n_steps {
                        let row = p * n_steps * self.d + ti * self.d;
                        for r in 0..self.d {
                            out.push_str(&format!(",{:.17e}", controls[row + r]));
                        }
                    } else {
                        for _ in 0..self.d {
                            out.push(',');
                        }
                    }
                }
                out.push('\n');
            }
        }
        Ok(out)
    }
}

struct PathOut {
    states: Vec<f64>,
    controls: Vec<f64>,
    energy: f64,
    girsanov: f64,
    saturations: u64,
}

enum InitPrep<'a> {
    Gaussian(&'a GaussianMeasure),
    Grid { measure: &'a GridMeasure, cdf: Vec<f64> },
    States(&'a [DVector<f64>]),
}

impl InitPrep<'_> {
    fn draw(&self, rng: &mut rand_chacha::ChaCha8Rng, path: usize) -> DVector<f64> {
        match self {
            InitPrep::Gaussian(m) => m.sample(rng),
            InitPrep::Grid { measure, cdf } => {
                let u: f64 = rand::Rng::random(rng);
                let idx = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                measure.grid().node(idx)
            }
            InitPrep::States(states) => states[path % states.len()].clone(),
        }
    }
}

/// Euler-Maruyama simulation of the controlled chain
/// `dx = (M(t, x) + G u) dt + G sigma dW`.
///
/// The control acts on the first block only and is evaluated at the left
/// endpoint of each step; its norm is capped at `opts.control_cap` with
/// saturations counted. Energy and Girsanov accumulators use the same
/// Gaussian increments as the state update. Paths run on derived RNG streams
/// indexed by `(seed, stream_source, path)`, and results are merged in path
/// order, so output is bit-identical between parallel and sequential runs.
pub fn simulate_controlled(
    spec: &ChainSpec,
    control: Control<'_>,
    init: InitialLaw<'_>,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    let nd = spec.dim();
    let d = spec.d();
    let horizon = spec.horizon();
    if opts.n_paths == 0 {
        return Err(Error::InvalidSpec("need at least one path".into()));
    }
    if !(opts.control_cap > 0.0) || !(opts.blow_up_norm > 0.0) {
        return Err(Error::InvalidSpec("control cap and blow-up norm must be positive".into()));
    }
    let times = opts.time_grid(horizon)?;
    let n_steps = times.len() - 1;
    let dt = horizon / n_steps as f64;
    let sqrt_dt = dt.sqrt();

    if let Control::Affine(steps) = &control {
        if steps.len() != n_steps {
            return Err(Error::InvalidSpec(format!(
                "affine schedule has {} steps, the time grid has {n_steps}",
                steps.len()
            )));
        }
        for step in *steps {
            if step.k_mat.nrows() != d || step.k_mat.ncols() != nd || step.k_vec.len() != d {
                return Err(Error::InvalidSpec(
                    "affine schedule dimensions do not match the chain".into(),
                ));
            }
        }
    }

    // Indices of the stored states along the step grid.
    let stored: Vec<usize> = if opts.store_full {
        (0..=n_steps).collect()
    } else {
        match &opts.checkpoints {
            None => {
                if n_steps == 0 {
                    vec![0]
                } else {
                    vec![0, n_steps]
                }
            }
            Some(cps) => {
                let mut idx = Vec::with_capacity(cps.len());
                for &cp in cps {
                    if !cp.is_finite() || cp < -TIME_MATCH_TOL || cp > horizon + TIME_MATCH_TOL {
                        return Err(Error::InvalidSpec(format!(
                            "checkpoint {cp} outside [0, {horizon}]"
                        )));
                    }
                    idx.push(((cp / dt).round() as usize).min(n_steps));
                }
                idx.sort_unstable();
                idx.dedup();
                if idx.is_empty() {
                    return Err(Error::InvalidSpec("no checkpoints requested".into()));
                }
                idx
            }
        }
    };
    let store_controls = opts.store_full;
    let requested = opts
        .n_paths
        .saturating_mul(stored.len() * nd + if store_controls { n_steps * d } else { 0 });
    if requested > MAX_STORED_VALUES {
        return Err(Error::SizeGuard {
            what: "simulation storage",
            requested,
            limit: MAX_STORED_VALUES,
        });
    }

    let init_prep = match init {
        InitialLaw::Gaussian(m) => {
            if m.dim() != nd {
                return Err(Error::InvalidSpec(format!(
                    "initial law has dim {}, spec needs {nd}",
                    m.dim()
                )));
            }
            InitPrep::Gaussian(m)
        }
        InitialLaw::Grid(m) => {
            if m.grid().dim() != nd {
                return Err(Error::InvalidSpec(format!(
                    "initial lattice has dim {}, spec needs {nd}",
                    m.grid().dim()
                )));
            }
            if m.is_sigma_finite() || (m.mass() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidSpec(
                    "initial grid law must be a probability measure".into(),
                ));
            }
            let mut acc = 0.0;
            let cdf = m
                .weights()
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect();
            InitPrep::Grid { measure: m, cdf }
        }
        InitialLaw::States(states) => {
            if states.is_empty() {
                return Err(Error::InvalidSpec("empty list of start states".into()));
            }
            if states.iter().any(|x| x.len() != nd) {
                return Err(Error::InvalidSpec(format!("start states must have dim {nd}")));
            }
            InitPrep::States(states)
        }
    };

    // For constant sigma, |sigma^-1 u|^2 serves both accumulators; precompute
    // the inverse once.
    let sigma_inv_const: Option<DMatrix<f64>> = match spec.constant_sigma() {
        Some(s) => Some(s.clone().try_inverse().ok_or_else(|| Error::Numerical {
            what: "simulation setup",
            detail: "sigma is singular".into(),
            value: 0.0,
        })?),
        None => None,
    };

    let per_path = |p: usize| -> Result<PathOut> {
        let mut rng = stream_rng(opts.seed, StreamDomain::Ensemble, opts.stream_source, p as u64);
        let mut x = init_prep.draw(&mut rng, p);
        let mut states = Vec::with_capacity(stored.len() * nd);
        let mut controls =
            if store_controls { Vec::with_capacity(n_steps * d) } else { Vec::new() };
        let mut energy = 0.0;
        let mut girsanov = 0.0;
        let mut saturations = 0u64;
        let mut cursor = 0usize;
        if stored[cursor] == 0 {
            states.extend_from_slice(x.as_slice());
            cursor += 1;
        }
        let mut dw = DVector::zeros(d);
        for k in 0..n_steps {
            let t = times[k];
            let x_norm = x.norm();
            if !x_norm.is_finite() || x_norm > opts.blow_up_norm {
                return Err(Error::TrajectoryBlowUp { path: p, t, x_norm });
            }
            let u = match &control {
                Control::None => None,
                Control::Evaluator(f) => Some(f(t, &x)?),
                Control::Affine(steps) => Some(&steps[k].k_mat * &x + &steps[k].k_vec),
            };
            let u = match u {
                None => None,
                Some(mut u) => {
                    if u.len() != d || u.iter().any(|v| !v.is_finite()) {
                        return Err(Error::EvaluatorFailure {
                            what: "control evaluation",
                            t,
                            x_norm,
                        });
                    }
                    let norm = u.norm();
                    if norm > opts.control_cap {
                        u.scale_mut(opts.control_cap / norm);
                        saturations += 1;
                    }
                    Some(u)
                }
            };
            for i in 0..d {
                dw[i] = rng.sample::<f64, _>(rand_distr::StandardNormal) * sqrt_dt;
            }
            let sigma_local;
            let noise_inc = match spec.constant_sigma() {
                Some(s) => s * &dw,
                None => {
                    sigma_local = spec.sigma(t, &x);
                    &sigma_local * &dw
                }
            };
            if let Some(u) = &u {
                let w = match &sigma_inv_const {
                    Some(inv) => inv * u,
                    None => {
                        spec.sigma(t, &x).lu().solve(u).ok_or(Error::Numerical {
                            what: "control energy",
                            detail: format!("sigma is singular at t={t}"),
                            value: 0.0,
                        })?
                    }
                };
                let quad = w.norm_squared();
                energy += 0.5 * quad * dt;
                girsanov += w.dot(&dw) - 0.5 * quad * dt;
                if store_controls {
                    controls.extend_from_slice(u.as_slice());
                }
                let drift = spec.drift(t, &x);
                x.axpy(dt, &drift, 1.0);
                for i in 0..d {
                    x[i] += u[i] * dt + noise_inc[i];
                }
            } else {
                if store_controls {
                    controls.extend(std::iter::repeat_n(0.0, d));
                }
                let drift = spec.drift(t, &x);
                x.axpy(dt, &drift, 1.0);
                for i in 0..d {
                    x[i] += noise_inc[i];
                }
            }
            if cursor < stored.len() && stored[cursor] == k + 1 {
                states.extend_from_slice(x.as_slice());
                cursor += 1;
            }
        }
        let x_norm = x.norm();
        if !x_norm.is_finite() || x_norm > opts.blow_up_norm {
            return Err(Error::TrajectoryBlowUp { path: p, t: horizon, x_norm });
        }
        Ok(PathOut { states, controls, energy, girsanov, saturations })
    };

    let outs = par::try_map_indexed(opts.n_paths, per_path)?;
    let stored_times: Vec<f64> = stored.iter().map(|&k| times[k]).collect();
    let mut states = Vec::with_capacity(opts.n_paths * stored.len() * nd);
    let mut controls = if store_controls {
        Some(Vec::with_capacity(opts.n_paths * n_steps * d))
    } else {
        None
    };
    let mut energy = Vec::with_capacity(opts.n_paths);
    let mut girsanov_logw = Vec::with_capacity(opts.n_paths);
    let mut saturations = Vec::with_capacity(opts.n_paths);
    for out in outs {
        states.extend_from_slice(&out.states);
        if let Some(c) = controls.as_mut() {
            c.extend_from_slice(&out.controls);
        }
        energy.push(out.energy);
        girsanov_logw.push(out.girsanov);
        saturations.push(out.saturations);
    }
    Ok(PathEnsemble {
        times: stored_times,
        states,
        controls,
        energy,
        girsanov_logw,
        saturations,
        seed: opts.seed,
        nd,
        d,
    })
}

// ---------------------------------------------------------------------------
// Transformed kernel, martingale diagnostics, value function
// ---------------------------------------------------------------------------

/// The h-transformed transition density
/// `q^h(s, x, t, y) = q(s, x, t, y) h(t, y) / h(s, x)`.
pub fn h_transform_density(
    kernel: &GaussianKernel,
    h: &HField,
    s: f64,
    x: &DVector<f64>,
    t: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    if !(s < t) {
        return Err(Error::InvalidSpec(format!("need s < t, got s={s}, t={t}")));
    }
    if (kernel.s() - s).abs() > TIME_MATCH_TOL || (kernel.t() - t).abs() > TIME_MATCH_TOL {
        return Err(Error::InvalidSpec(format!(
            "kernel spans [{}, {}] but the transform was requested on [{s}, {t}]",
            kernel.s(),
            kernel.t()
        )));
    }
    let log_q = kernel.log_density(x, y)?;
    Ok((log_q + h.log_h(t, y)? - h.log_h(s, x)?).exp())
}

/// Reweight a lattice kernel row-wise by `h(t, y_j) / h(s, x_i)`; rows are
/// renormalized on assembly, absorbing the residual quadrature defect of the
/// tower property.
pub fn h_transform_grid(kernel: &GridKernel, h: &HField) -> Result<GridKernel> {
    let grid = kernel.grid();
    let nd = grid.dim();
    let mut nodes = vec![0.0; grid.len() * nd];
    for j in 0..grid.len() {
        grid.node_into(j, &mut nodes[j * nd..(j + 1) * nd]);
    }
    let log_h_t = h.log_h_many(kernel.t(), &nodes, nd)?;
    let rows = par::try_map_indexed(kernel.n_sources(), |i| {
        let source = kernel.source_nodes()[i];
        let x = grid.node(source);
        let log_h_s = h.log_h(kernel.s(), &x)?;
        let row = kernel.row(i);
        Ok((0..grid.len())
            .map(|j| {
                if row[j] > 0.0 {
                    (row[j].ln() + log_h_t[j] - log_h_s).exp()
                } else {
                    0.0
                }
            })
            .collect::<Vec<f64>>())
    })?;
    GridKernel::from_rows(
        grid.clone(),
        kernel.source_nodes().to_vec(),
        rows,
        kernel.s(),
        kernel.t(),
    )
}

/// Per-time statistics of the change-of-measure process
/// `z_t = h(t, x_t) / h(t_0, x_{t_0})` over a stored ensemble.
#[derive(Debug, Clone)]
pub struct MartingaleReport {
    pub times: Vec<f64>,
    /// `E[z_t]`; equals 1 at every time when the ensemble is uncontrolled.
    pub mean_z: Vec<Estimate>,
    /// `E[z_t log z_t]`; nondecreasing in `t` (relative-entropy submartingale).
    pub mean_z_log_z: Vec<Estimate>,
}

/// Evaluate the martingale diagnostics of `h` on an ensemble simulated under
/// the uncontrolled law. The first stored time acts as the normalization
/// point, so ensembles should store `t = 0`.
pub fn martingale_check(h: &HField, ensemble: &PathEnsemble) -> Result<MartingaleReport> {
    let nd = ensemble.dim();
    let n = ensemble.n_paths();
    if n < 2 {
        return Err(Error::InvalidSpec("martingale check needs at least two paths".into()));
    }
    let base = h.log_h_many(ensemble.times()[0], &ensemble.states_at(0), nd)?;
    let mut mean_z = Vec::with_capacity(ensemble.n_times());
    let mut mean_z_log_z = Vec::with_capacity(ensemble.n_times());
    for ti in 0..ensemble.n_times() {
        let log_h_t = h.log_h_many(ensemble.times()[ti], &ensemble.states_at(ti), nd)?;
        let mut z = Vec::with_capacity(n);
        let mut zlz = Vec::with_capacity(n);
        for p in 0..n {
            let log_z = log_h_t[p] - base[p];
            let zp = log_z.exp();
            if !zp.is_finite() {
                return Err(Error::Numerical {
                    what: "martingale check",
                    detail: format!("z overflowed on path {p}"),
                    value: log_z,
                });
            }
            z.push(zp);
            zlz.push(zp * log_z);
        }
        mean_z.push(mean_stderr(&z));
        mean_z_log_z.push(mean_stderr(&zlz));
    }
    Ok(MartingaleReport { times: ensemble.times().to_vec(), mean_z, mean_z_log_z })
}

/// The value function `J(t, x) = -log h(t, x)` of the minimum-energy control
/// problem with terminal reward `log g`.
pub fn value_function(h: &HField, t: f64, x: &DVector<f64>) -> Result<f64> {
    let log_h = h.log_h(t, x)?;
    if !log_h.is_finite() {
        return Err(Error::Numerical {
            what: "value function",
            detail: "h underflowed to zero".into(),
            value: log_h,
        });
    }
    Ok(-log_h)
}

/// Finite-difference residual of the Hamilton-Jacobi-Bellman equation
/// `dJ/dt + L J - 1/2 a D_{x^1}J . D_{x^1}J = 0` satisfied by `J = -log h`.
/// The time derivative is central with a step shrunk to stay inside `(0, T)`.
pub fn hjb_residual(
    h: &HField,
    spec: &ChainSpec,
    t: f64,
    x: &DVector<f64>,
    fd_step: f64,
) -> Result<f64> {
    if !(fd_step.is_finite() && fd_step > 0.0) {
        return Err(Error::InvalidSpec(format!("fd_step must be positive, got {fd_step}")));
    }
    let horizon = spec.horizon();
    let dt = fd_step.min(0.45 * t).min(0.45 * (horizon - t));
    if !(dt > 0.0) {
        return Err(Error::PreconditionViolated(format!(
            "probe time t={t} must lie strictly inside (0, {horizon})"
        )));
    }
    let j_plus = value_function(h, t + dt, x)?;
    let j_minus = value_function(h, t - dt, x)?;
    let dj_dt = (j_plus - j_minus) / (2.0 * dt);

    let j_fun = |y: &DVector<f64>| value_function(h, t, y).unwrap_or(f64::NAN);
    let generator = apply_generator(spec, &j_fun, t, x, Some(fd_step))?;

    let d = spec.d();
    let mut grad1 = DVector::zeros(d);
    let mut probe = x.clone();
    for i in 0..d {
        probe[i] = x[i] + fd_step;
        let fp = value_function(h, t, &probe)?;
        probe[i] = x[i] - fd_step;
        let fm = value_function(h, t, &probe)?;
        probe[i] = x[i];
        grad1[i] = (fp - fm) / (2.0 * fd_step);
    }
    let a = spec.diffusion(t, x);
    Ok(dj_dt + generator - 0.5 * grad1.dot(&(&a * &grad1)))
}
