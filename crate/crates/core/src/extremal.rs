//! Most-probable trajectories of the degenerate chain diffusion.
//!
//! Small-tube asymptotics attach to every differentiable path `phi` on
//! `[0, T]` an action `S[phi] = \int_0^T L(t, phi, phidot) dt`: the
//! probability that the uncontrolled diffusion stays within a sup-norm tube
//! of radius `eps` around `phi` behaves like `kappa_eps * exp(-S[phi])`,
//! with a prefactor `kappa_eps` that depends on the radius but not on the
//! path.  Because noise enters through the first block only, the Lagrangian
//! is the squared defect measured in the degenerate norm
//!
//! ```text
//!     L(t, phi, phidot) = 1/2 | sigma(t, phi)^{-1} G^T (M(t, phi) - phidot) |^2 ,
//! ```
//!
//! finite only when the deterministic blocks satisfy their velocity
//! constraints `phidot^j = m_j(t, phi)` for `j >= 2` exactly; any violation
//! there costs infinitely much and is reported as an infinite Lagrangian.
//! Ratios of tube probabilities for two paths with a common start therefore
//! converge to `exp(-S[phi_A] + S[phi_B])`, which is what
//! [`tube_probability_ratio`] estimates by direct Monte Carlo counting.
//!
//! Minimisers of the action over paths with pinned endpoints — the extreme
//! trajectories of the Euler-Lagrange equations — are computed variationally:
//! the unknowns are the interior first-block nodes on a uniform time grid,
//! the deterministic blocks are reconstructed by a midpoint rollout of their
//! velocity constraints (a hard constraint, never penalised), and the
//! discrete action, a midpoint-rule sum of block-one defects, is brought to
//! stationarity with a constrained Gauss-Newton iteration.  For affine
//! drifts the problem is a quadratic program and one KKT solve reaches the
//! discrete optimum to near machine precision.
//!
//! Reweighting the diffusion by a space-time harmonic function `h`
//! (`dh/dt + L h = 0`, `h > 0`) adds `a(t, x) D_{x^1} log h` to the
//! first-block drift and transforms the Lagrangian accordingly
//! ([`lagrangian_h`]).  The transformed Lagrangian differs from the free one
//! by a total time derivative plus a path-independent-in-leading-order
//! curvature term, so both actions have the same extreme trajectories.
//! [`prop6_check`] verifies this invariance: it solves the two boundary-value
//! problems on one grid and compares the paths, after probing that `h`
//! actually satisfies the backward equation — fields that fail the probe are
//! refused, because for them the invariance has no reason to hold.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::chain::ChainSpec;
use crate::error::{Error, Result};
use crate::htransform::{hjb_residual, HField};
use crate::par;
use crate::rng::{stream_rng, StreamDomain};

/// Minimum number of time steps for the boundary-value solver: below this
/// the midpoint rollout cannot resolve the velocity constraints.
pub const EL_MIN_STEPS: usize = 16;

/// Stationarity target for the constrained minimisation, measured as the
/// max-norm of the reduced gradient plus the least-squares multiplier term.
/// Affine problems reach it in a single KKT solve.
pub const EL_STATIONARITY_TOL: f64 = 1e-10;

/// Feasibility target for the terminal blocks of the rollout, relative to
/// the scale of the requested terminal state.
pub const EL_CONSTRAINT_TOL: f64 = 1e-9;

/// Iteration budget for the Gauss-Newton loop.
pub const EL_MAX_ITERATIONS: usize = 40;

/// Relative tolerance below which the deterministic blocks of a supplied
/// velocity count as satisfying their constraint.  Central-difference node
/// velocities of solver output carry an `O(step^2)` defect, so the sentinel
/// must sit well above that and well below any genuine violation.
pub const LAGRANGIAN_DEFECT_TOL: f64 = 1e-3;

/// Relative step for the central finite differences that linearise the
/// drift.  Large enough that the `|f| * eps_machine / step` rounding floor
/// stays near 1e-11 (affine drifts differentiate exactly up to that floor),
/// small enough that smooth nonlinear drifts keep quadratic accuracy.
const DRIFT_FD_STEP: f64 = 3e-5;

/// Fewest tube hits from which a count ratio is reported.
pub const TUBE_MIN_HITS: u64 = 100;

/// Largest backward-equation residual, over the probe set, that
/// [`prop6_check`] accepts before comparing extremals.
pub const PROP6_RESIDUAL_GATE: f64 = 1e-3;

/// Finite-difference step for the backward-equation probes.
const PROP6_GATE_FD_STEP: f64 = 1e-4;

/// The invariance tolerance is anchored at this resolution: at
/// `PROP6_REFERENCE_STEPS` steps the two extremals of a passing field must
/// agree to `PROP6_SUP_TOL_AT_REFERENCE` (times a path-scale factor), and
/// the allowance scales as `step^2` away from the anchor, matching the
/// discretisation order of the solver.
pub const PROP6_REFERENCE_STEPS: f64 = 512.0;

/// Sup-distance allowance per unit path scale at the reference resolution.
pub const PROP6_SUP_TOL_AT_REFERENCE: f64 = 1e-4;

/// A trajectory on a uniform time grid: states, node velocities, action and
/// the stationarity residual of the discrete Euler-Lagrange system it came
/// from (for externally supplied paths, the residual it *would* need to be
/// an extremal, which is a diagnostic, not a promise).
#[derive(Clone, Debug, Serialize)]
pub struct ExtremalPath {
    d: usize,
    dim: usize,
    times: Vec<f64>,
    /// Node states, node-major: entry `k * dim + i` is coordinate `i` at node `k`.
    phi: Vec<f64>,
    /// Node velocities from second-order differences of `phi`.
    phidot: Vec<f64>,
    action: f64,
    residual: f64,
}

impl ExtremalPath {
    fn from_nodes(
        d: usize,
        dim: usize,
        times: Vec<f64>,
        nodes: &[DVector<f64>],
        action: f64,
        residual: f64,
    ) -> Self {
        let mut phi = Vec::with_capacity(nodes.len() * dim);
        for x in nodes {
            phi.extend_from_slice(x.as_slice());
        }
        let phidot = fd_velocities(&times, &phi, dim);
        ExtremalPath { d, dim, times, phi, phidot, action, residual }
    }

    /// Wraps an externally supplied trajectory sampled on a uniform grid of
    /// at least [`EL_MIN_STEPS`] intervals.  The action is the trapezoid sum
    /// of the free Lagrangian along the nodes (infinite if the deterministic
    /// blocks violate their velocity constraints) and the residual is the
    /// path's stationarity defect in the free boundary-value problem.
    pub fn from_states(spec: &ChainSpec, times: &[f64], states: &[f64]) -> Result<Self> {
        let dim = spec.dim();
        if times.len() < 2 || states.len() != times.len() * dim {
            return Err(Error::InvalidSpec(format!(
                "path needs times and {dim} states per node, got {} times and {} values",
                times.len(),
                states.len()
            )));
        }
        let k_steps = times.len() - 1;
        if k_steps < EL_MIN_STEPS {
            return Err(Error::InvalidSpec(format!(
                "path needs at least {EL_MIN_STEPS} steps, got {k_steps}"
            )));
        }
        let delta = (times[k_steps] - times[0]) / k_steps as f64;
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidSpec("path times must increase".into()));
        }
        for (k, pair) in times.windows(2).enumerate() {
            if ((pair[1] - pair[0]) - delta).abs() > 1e-9 * delta.max(1.0) {
                return Err(Error::InvalidSpec(format!(
                    "path times must be uniform; interval {k} has width {}",
                    pair[1] - pair[0]
                )));
            }
        }
        if times[0].abs() > 1e-12 || (times[k_steps] - spec.horizon()).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "path must span [0, {}], got [{}, {}]",
                spec.horizon(),
                times[0],
                times[k_steps]
            )));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("path states must be finite".into()));
        }
        let phidot = fd_velocities(times, states, dim);
        let mut action = 0.0;
        for k in 0..=k_steps {
            let x = DVector::from_column_slice(&states[k * dim..(k + 1) * dim]);
            let v = DVector::from_column_slice(&phidot[k * dim..(k + 1) * dim]);
            let weight = if k == 0 || k == k_steps { 0.5 } else { 1.0 };
            action += weight * delta * lagrangian(spec, times[k], &x, &v)?;
            if action.is_infinite() {
                break;
            }
        }
        let x0 = DVector::from_column_slice(&states[0..dim]);
        let xt = DVector::from_column_slice(&states[k_steps * dim..(k_steps + 1) * dim]);
        let problem = ReducedProblem::new(spec, None, x0, xt, k_steps)?;
        let mut z = DVector::zeros(problem.nz);
        for k in 1..k_steps {
            z.rows_mut((k - 1) * problem.d, problem.d)
                .copy_from_slice(&states[k * dim..k * dim + problem.d]);
        }
        let residual = problem.stationarity_at(&z)?;
        Ok(ExtremalPath {
            d: spec.d(),
            dim,
            times: times.to_vec(),
            phi: states.to_vec(),
            phidot,
            action,
            residual,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn action(&self) -> f64 {
        self.action
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// State at node `k`.
    pub fn node(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.phi[k * self.dim..(k + 1) * self.dim])
    }

    /// Node velocity at node `k`.
    pub fn velocity(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.phidot[k * self.dim..(k + 1) * self.dim])
    }

    /// Linear interpolation of the stored nodes at an arbitrary time.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let k_steps = self.n_steps();
        let horizon = self.times[k_steps];
        let delta = horizon / k_steps as f64;
        let s = (t.clamp(0.0, horizon)) / delta;
        let k = (s.floor() as usize).min(k_steps - 1);
        let frac = s - k as f64;
        let lo = &self.phi[k * self.dim..(k + 1) * self.dim];
        let hi = &self.phi[(k + 1) * self.dim..(k + 2) * self.dim];
        DVector::from_iterator(self.dim, lo.iter().zip(hi).map(|(a, b)| a + frac * (b - a)))
    }

    /// Largest Euclidean node distance to another path on the same grid.
    pub fn sup_distance(&self, other: &ExtremalPath) -> Result<f64> {
        if self.dim != other.dim || self.times.len() != other.times.len() {
            return Err(Error::InvalidSpec(format!(
                "paths are not comparable: dims {} vs {}, {} vs {} nodes",
                self.dim,
                other.dim,
                self.times.len(),
                other.times.len()
            )));
        }
        for (a, b) in self.times.iter().zip(&other.times) {
            if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
                return Err(Error::InvalidSpec("paths use different time grids".into()));
            }
        }
        let mut sup: f64 = 0.0;
        for k in 0..self.times.len() {
            let mut acc = 0.0;
            for i in 0..self.dim {
                let diff = self.phi[k * self.dim + i] - other.phi[k * self.dim + i];
                acc += diff * diff;
            }
            sup = sup.max(acc.sqrt());
        }
        Ok(sup)
    }

    /// CSV table: time, state blocks, then velocity blocks.
    pub fn to_csv(&self) -> String {
        let n_blocks = self.dim / self.d;
        let mut out = String::from("t");
        for prefix in ["phi", "phidot"] {
            for j in 1..=n_blocks {
                for i in 1..=self.d {
                    out.push_str(&format!(",{prefix}_{j}_{i}"));
                }
            }
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t:.12e}"));
            for source in [&self.phi, &self.phidot] {
                for i in 0..self.dim {
                    out.push_str(&format!(",{:.12e}", source[k * self.dim + i]));
                }
            }
            out.push('\n');
        }
        out
    }

}

/// Second-order finite-difference node velocities (central inside,
/// one-sided at the two ends).
fn fd_velocities(times: &[f64], phi: &[f64], dim: usize) -> Vec<f64> {
    let k_last = times.len() - 1;
    let delta = (times[k_last] - times[0]) / k_last as f64;
    let mut out = vec![0.0; phi.len()];
    let get = |k: usize, i: usize| phi[k * dim + i];
    for i in 0..dim {
        out[i] = (-3.0 * get(0, i) + 4.0 * get(1, i) - get(2, i)) / (2.0 * delta);
        out[k_last * dim + i] =
            (3.0 * get(k_last, i) - 4.0 * get(k_last - 1, i) + get(k_last - 2, i)) / (2.0 * delta);
        for k in 1..k_last {
            out[k * dim + i] = (get(k + 1, i) - get(k - 1, i)) / (2.0 * delta);
        }
    }
    out
}

/// Which action a boundary-value solve minimises: the free one or the one
/// transformed by a positive space-time harmonic reweighting.
#[derive(Clone, Copy)]
pub enum LagrangianKind<'a> {
    Free,
    Transformed(&'a HField),
}

/// Pointwise free Lagrangian `1/2 |sigma^{-1}(m_1 - phidot^1)|^2`, or
/// `+inf` when the deterministic blocks violate their velocity constraints
/// by more than [`LAGRANGIAN_DEFECT_TOL`] relative to the local scale.
pub fn lagrangian(spec: &ChainSpec, t: f64, phi: &DVector<f64>, phidot: &DVector<f64>) -> Result<f64> {
    lagrangian_impl(spec, None, t, phi, phidot)
}

/// Pointwise transformed Lagrangian: the first-block drift gains
/// `a D_{x^1} log h`.  For `h == 1` this is bit-for-bit the free Lagrangian.
pub fn lagrangian_h(
    spec: &ChainSpec,
    h: &HField,
    t: f64,
    phi: &DVector<f64>,
    phidot: &DVector<f64>,
) -> Result<f64> {
    lagrangian_impl(spec, Some(h), t, phi, phidot)
}

fn lagrangian_impl(
    spec: &ChainSpec,
    h: Option<&HField>,
    t: f64,
    phi: &DVector<f64>,
    phidot: &DVector<f64>,
) -> Result<f64> {
    let dim = spec.dim();
    let d = spec.d();
    if phi.len() != dim || phidot.len() != dim {
        return Err(Error::InvalidSpec(format!(
            "state/velocity dimension ({}, {}) does not match the chain dimension {dim}",
            phi.len(),
            phidot.len()
        )));
    }
    let m = spec.drift(t, phi);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::EvaluatorFailure { what: "drift", t, x_norm: phi.norm() });
    }
    let scale = 1.0 + m.amax() + phidot.amax();
    for i in d..dim {
        if (m[i] - phidot[i]).abs() > LAGRANGIAN_DEFECT_TOL * scale {
            return Ok(f64::INFINITY);
        }
    }
    let mut f1 = m.rows(0, d).into_owned();
    if let Some(field) = h {
        let g = field.grad1_log_h(t, phi)?;
        if g.len() == d {
            f1 += spec.diffusion(t, phi) * g;
        } else if g.len() != 0 {
            return Err(Error::InvalidSpec(format!(
                "h-field gradient has dimension {}, expected {d}",
                g.len()
            )));
        }
    }
    let defect = f1 - phidot.rows(0, d);
    let w = solve_sigma(&spec.sigma(t, phi), &defect)?;
    Ok(0.5 * w.norm_squared())
}

fn solve_sigma(sigma: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    sigma.clone().lu().solve(v).ok_or_else(|| Error::Numerical {
        what: "noise-block inversion",
        detail: "sigma is singular along the path".into(),
        value: sigma.determinant(),
    })
}

// ---------------------------------------------------------------------------
// Reduced boundary-value problem
// ---------------------------------------------------------------------------

/// The discrete constrained minimisation behind [`solve_euler_lagrange`]:
/// unknowns are the interior first-block nodes `z`, the deterministic
/// blocks follow by a midpoint rollout of their velocity constraints, and
/// the terminal values of that rollout must match the requested endpoint.
struct ReducedProblem<'a> {
    spec: &'a ChainSpec,
    h: Option<&'a HField>,
    x0: DVector<f64>,
    xt: DVector<f64>,
    k_steps: usize,
    delta: f64,
    d: usize,
    dim: usize,
    rest: usize,
    nz: usize,
}

/// One linearisation of the reduced problem at a point `z`.
struct Assembled {
    nodes: Vec<DVector<f64>>,
    objective: f64,
    grad: DVector<f64>,
    hess: Option<DMatrix<f64>>,
    c: DVector<f64>,
    cj: DMatrix<f64>,
}

impl<'a> ReducedProblem<'a> {
    fn new(
        spec: &'a ChainSpec,
        h: Option<&'a HField>,
        x0: DVector<f64>,
        xt: DVector<f64>,
        k_steps: usize,
    ) -> Result<Self> {
        let dim = spec.dim();
        let d = spec.d();
        if x0.len() != dim || xt.len() != dim {
            return Err(Error::InvalidSpec(format!(
                "boundary states have dimensions ({}, {}), expected {dim}",
                x0.len(),
                xt.len()
            )));
        }
        if x0.iter().chain(xt.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("boundary states must be finite".into()));
        }
        if k_steps < EL_MIN_STEPS {
            return Err(Error::InvalidSpec(format!(
                "boundary-value solve needs at least {EL_MIN_STEPS} steps, got {k_steps}"
            )));
        }
        Ok(ReducedProblem {
            spec,
            h,
            x0,
            xt,
            k_steps,
            delta: spec.horizon() / k_steps as f64,
            d,
            dim,
            rest: dim - d,
            nz: (k_steps - 1) * d,
        })
    }

    /// Total first-block drift, including the reweighting term if present.
    fn f1(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.spec.drift(t, x);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluatorFailure { what: "drift", t, x_norm: x.norm() });
        }
        let mut f1 = m.rows(0, self.d).into_owned();
        if let Some(field) = self.h {
            let g = field.grad1_log_h(t, x)?;
            if g.len() == self.d {
                f1 += self.spec.diffusion(t, x) * g;
            } else if g.len() != 0 {
                return Err(Error::InvalidSpec(format!(
                    "h-field gradient has dimension {}, expected {}",
                    g.len(),
                    self.d
                )));
            }
            if f1.iter().any(|v| !v.is_finite()) {
                return Err(Error::EvaluatorFailure { what: "reweighted drift", t, x_norm: x.norm() });
            }
        }
        Ok(f1)
    }

    fn drift_rest(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.spec.drift(t, x);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluatorFailure { what: "drift", t, x_norm: x.norm() });
        }
        Ok(m.rows(self.d, self.rest).into_owned())
    }

    /// Central-difference Jacobian of a state map `R^dim -> R^out`.
    fn fd_jacobian(
        &self,
        out_dim: usize,
        t: f64,
        x: &DVector<f64>,
        eval: impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(out_dim, self.dim);
        let mut probe = x.clone();
        for j in 0..self.dim {
            let step = DRIFT_FD_STEP * (1.0 + x[j].abs());
            probe[j] = x[j] + step;
            let plus = eval(t, &probe)?;
            probe[j] = x[j] - step;
            let minus = eval(t, &probe)?;
            probe[j] = x[j];
            jac.set_column(j, &((plus - minus) / (2.0 * step)));
        }
        Ok(jac)
    }

    /// First-block value of node `k` given the unknowns `z`.
    fn node_block1(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        if k == 0 {
            self.x0.rows(0, self.d).into_owned()
        } else if k == self.k_steps {
            self.xt.rows(0, self.d).into_owned()
        } else {
            z.rows((k - 1) * self.d, self.d).into_owned()
        }
    }

    /// Column offset of node `k` inside `z`, if it is an unknown.
    fn z_offset(&self, k: usize) -> Option<usize> {
        (k >= 1 && k < self.k_steps).then(|| (k - 1) * self.d)
    }

    /// Rollout of the deterministic blocks plus the midpoint-rule action,
    /// without derivatives (used by the line search).
    fn rollout_value(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>, Vec<DVector<f64>>)> {
        let mut nodes = Vec::with_capacity(self.k_steps + 1);
        nodes.push(self.x0.clone());
        let mut objective = 0.0;
        for k in 0..self.k_steps {
            let t_k = k as f64 * self.delta;
            let t_mid = (k as f64 + 0.5) * self.delta;
            let p1_lo = self.node_block1(z, k);
            let p1_hi = self.node_block1(z, k + 1);
            let current = &nodes[k];
            let m_rest = self.drift_rest(t_k, current)?;
            let mut half = current.clone();
            half.rows_mut(0, self.d).copy_from(&((&p1_lo + &p1_hi) * 0.5));
            half.rows_mut(self.d, self.rest)
                .copy_from(&(current.rows(self.d, self.rest) + &m_rest * (0.5 * self.delta)));
            let m_half = self.drift_rest(t_mid, &half)?;
            let mut next = DVector::zeros(self.dim);
            next.rows_mut(0, self.d).copy_from(&p1_hi);
            next.rows_mut(self.d, self.rest)
                .copy_from(&(current.rows(self.d, self.rest) + &m_half * self.delta));
            let mid = (&nodes[k] + &next) * 0.5;
            let f1 = self.f1(t_mid, &mid)?;
            let defect = f1 - (&p1_hi - &p1_lo) / self.delta;
            let w = solve_sigma(&self.spec.sigma(t_mid, &mid), &defect)?;
            objective += 0.5 * self.delta * w.norm_squared();
            nodes.push(next);
        }
        let c = nodes[self.k_steps].rows(self.d, self.rest) - self.xt.rows(self.d, self.rest);
        Ok((objective, c, nodes))
    }

    /// Rollout with forward sensitivity propagation: gradient, optional
    /// Gauss-Newton Hessian, constraint values and constraint Jacobian.
    fn assemble(&self, z: &DVector<f64>, want_hess: bool) -> Result<Assembled> {
        let d = self.d;
        let rest = self.rest;
        let delta = self.delta;
        let mut nodes = Vec::with_capacity(self.k_steps + 1);
        nodes.push(self.x0.clone());
        // Sensitivity of the deterministic blocks of the current node to z.
        let mut p_prev = DMatrix::<f64>::zeros(rest, self.nz);
        let mut grad = DVector::<f64>::zeros(self.nz);
        let mut hess = want_hess.then(|| DMatrix::<f64>::zeros(self.nz, self.nz));
        let mut objective = 0.0;

        for k in 0..self.k_steps {
            let t_k = k as f64 * delta;
            let t_mid = (k as f64 + 0.5) * delta;
            let p1_lo = self.node_block1(z, k);
            let p1_hi = self.node_block1(z, k + 1);
            let current = nodes[k].clone();

            // Midpoint rollout of the deterministic blocks.
            let m_rest = self.drift_rest(t_k, &current)?;
            let mut half = current.clone();
            half.rows_mut(0, d).copy_from(&((&p1_lo + &p1_hi) * 0.5));
            half.rows_mut(d, rest)
                .copy_from(&(current.rows(d, rest) + &m_rest * (0.5 * delta)));
            let m_half = self.drift_rest(t_mid, &half)?;
            let mut next = DVector::zeros(self.dim);
            next.rows_mut(0, d).copy_from(&p1_hi);
            next.rows_mut(d, rest)
                .copy_from(&(current.rows(d, rest) + &m_half * delta));

            // Sensitivity propagation through the two rollout stages.
            let jac_stage = self.fd_jacobian(rest, t_k, &current, |t, x| self.drift_rest(t, x))?;
            let jac_half = self.fd_jacobian(rest, t_mid, &half, |t, x| self.drift_rest(t, x))?;
            let a1 = jac_stage.columns(0, d).into_owned();
            let ar = jac_stage.columns(d, rest).into_owned();
            let b1 = jac_half.columns(0, d).into_owned();
            let br = jac_half.columns(d, rest).into_owned();
            let mut p_next = &p_prev + (&br * &p_prev) * delta + (&br * (&ar * &p_prev)) * (0.5 * delta * delta);
            if let Some(col) = self.z_offset(k) {
                let block = &b1 * (0.5 * delta) + (&br * &a1) * (0.5 * delta * delta);
                p_next.columns_mut(col, d).add_assign_block(&block);
            }
            if let Some(col) = self.z_offset(k + 1) {
                let block = &b1 * (0.5 * delta);
                p_next.columns_mut(col, d).add_assign_block(&block);
            }

            // Block-one defect at the interval midpoint state.
            let mid = (&current + &next) * 0.5;
            let f1 = self.f1(t_mid, &mid)?;
            let defect = &f1 - (&p1_hi - &p1_lo) / delta;
            let sigma = self.spec.sigma(t_mid, &mid);
            let sigma_inv = sigma.clone().try_inverse().ok_or_else(|| Error::Numerical {
                what: "noise-block inversion",
                detail: "sigma is singular at an interval midpoint".into(),
                value: sigma.determinant(),
            })?;
            let w = &sigma_inv * &defect;
            objective += 0.5 * delta * w.norm_squared();

            let jac_f1 = self.fd_jacobian(d, t_mid, &mid, |t, x| self.f1(t, x))?;
            let f1_1 = jac_f1.columns(0, d).into_owned();
            let f1_r = jac_f1.columns(d, rest).into_owned();
            // dw/dz: dense part through the deterministic blocks, plus the
            // two node blocks of the direct first-block dependency.
            let mut jw = (&sigma_inv * &f1_r) * ((&p_prev + &p_next) * 0.5);
            let direct_half = &sigma_inv * &f1_1 * 0.5;
            let identity = &sigma_inv / delta;
            if let Some(col) = self.z_offset(k) {
                let block = &direct_half + &identity;
                jw.columns_mut(col, d).add_assign_block(&block);
            }
            if let Some(col) = self.z_offset(k + 1) {
                let block = &direct_half - &identity;
                jw.columns_mut(col, d).add_assign_block(&block);
            }
            grad += jw.transpose() * &w * delta;
            if let Some(hm) = hess.as_mut() {
                hm.gemm_tr(delta, &jw, &jw, 1.0);
            }

            p_prev = p_next;
            nodes.push(next);
        }

        let c = nodes[self.k_steps].rows(d, rest) - self.xt.rows(d, rest);
        Ok(Assembled { nodes, objective, grad, hess, c, cj: p_prev })
    }

    /// Max-norm of the reduced gradient after subtracting the best
    /// least-squares multiplier combination of the constraint rows.
    fn stationarity(&self, grad: &DVector<f64>, cj: &DMatrix<f64>) -> f64 {
        if self.rest == 0 {
            return grad.amax();
        }
        let mut gram = cj * cj.transpose();
        let reg = 1e-14 * (1.0 + gram.trace());
        for i in 0..self.rest {
            gram[(i, i)] += reg;
        }
        let rhs = -(cj * grad);
        match gram.lu().solve(&rhs) {
            Some(lambda) => (grad + cj.transpose() * lambda).amax(),
            None => grad.amax(),
        }
    }

    /// Stationarity residual of an arbitrary point of the reduced problem.
    fn stationarity_at(&self, z: &DVector<f64>) -> Result<f64> {
        let asm = self.assemble(z, false)?;
        Ok(self.stationarity(&asm.grad, &asm.cj))
    }

    /// One constrained Gauss-Newton step: reduces the constraint rows to a
    /// well-conditioned basis, refuses inconsistent (unreachable) targets
    /// and solves the KKT system.
    fn kkt_step(&self, asm: &Assembled) -> Result<(DVector<f64>, DVector<f64>)> {
        let hess = asm.hess.as_ref().expect("KKT step needs the Gauss-Newton Hessian");
        let svd = asm.cj.clone().svd(true, true);
        let s_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
        let rank = svd
            .singular_values
            .iter()
            .filter(|s| **s > 1e-11 * s_max.max(1e-300))
            .count();
        if rank < self.rest {
            // The linearised constraints are rank deficient: the target is
            // reachable only if it is consistent with the deficient rows.
            let best = svd.solve(&(-&asm.c), 1e-11).map_err(|msg| Error::Numerical {
                what: "constraint reduction",
                detail: msg.into(),
                value: s_max,
            })?;
            let mismatch = (&asm.cj * best + &asm.c).amax();
            if mismatch > 1e-8 * (1.0 + self.xt.amax()) {
                return Err(Error::Infeasible(format!(
                    "the deterministic blocks cannot reach the requested terminal state: \
                     best achievable mismatch {mismatch:.3e} with constraint rank {rank} of {}",
                    self.rest
                )));
            }
        }
        let u = svd.u.as_ref().expect("SVD with vectors");
        let basis = u.columns(0, rank).into_owned();
        let c_red = basis.transpose() * &asm.cj;
        let r_red = basis.transpose() * &asm.c;

        let n = self.nz + rank;
        let mut kkt = DMatrix::<f64>::zeros(n, n);
        kkt.view_mut((0, 0), (self.nz, self.nz)).copy_from(hess);
        kkt.view_mut((0, self.nz), (self.nz, rank)).copy_from(&c_red.transpose());
        kkt.view_mut((self.nz, 0), (rank, self.nz)).copy_from(&c_red);
        let mut rhs = DVector::<f64>::zeros(n);
        rhs.rows_mut(0, self.nz).copy_from(&(-&asm.grad));
        rhs.rows_mut(self.nz, rank).copy_from(&(-&r_red));

        let solve = |mat: DMatrix<f64>| mat.lu().solve(&rhs);
        let solution = solve(kkt.clone()).or_else(|| {
            let mut damped = kkt;
            let mu = 1e-10 * (1.0 + hess.trace() / self.nz as f64);
            for i in 0..self.nz {
                damped[(i, i)] += mu;
            }
            solve(damped)
        });
        let solution = solution.ok_or_else(|| Error::Numerical {
            what: "KKT solve",
            detail: "the reduced quadratic model is singular".into(),
            value: s_max,
        })?;
        let dz = solution.rows(0, self.nz).into_owned();
        let lambda = solution.rows(self.nz, rank).into_owned();
        if dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                what: "KKT solve",
                detail: "non-finite Newton step".into(),
                value: dz.amax(),
            });
        }
        Ok((dz, basis * lambda))
    }

    /// Runs the constrained Gauss-Newton iteration from a straight-line
    /// initial guess and returns the final linearisation point.
    fn solve(&self) -> Result<(DVector<f64>, Assembled, f64)> {
        let mut z = DVector::zeros(self.nz);
        for k in 1..self.k_steps {
            let frac = k as f64 / self.k_steps as f64;
            let node = self.x0.rows(0, self.d) * (1.0 - frac) + self.xt.rows(0, self.d) * frac;
            z.rows_mut((k - 1) * self.d, self.d).copy_from(&node);
        }
        let feas_tol = EL_CONSTRAINT_TOL * (1.0 + self.xt.amax());
        let mut asm = self.assemble(&z, true)?;
        for _ in 0..EL_MAX_ITERATIONS {
            let stat = self.stationarity(&asm.grad, &asm.cj);
            let feas = asm.c.amax();
            if stat <= EL_STATIONARITY_TOL * (1.0 + asm.objective.abs()) && feas <= feas_tol {
                return Ok((z, asm, stat));
            }
            let (dz, lambda) = self.kkt_step(&asm)?;
            let penalty = 10.0 * (1.0 + lambda.amax());
            let merit = asm.objective + penalty * asm.c.lp_norm(1);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..14 {
                let z_try = &z + &dz * step;
                match self.rollout_value(&z_try) {
                    Ok((obj_try, c_try, _)) => {
                        let merit_try = obj_try + penalty * c_try.lp_norm(1);
                        // Full steps must pass; shrink only on a genuine
                        // merit increase (beyond rounding slack).
                        if merit_try <= merit + 1e-12 * (1.0 + merit.abs()) {
                            z = z_try;
                            accepted = true;
                            break;
                        }
                    }
                    Err(_) => {}
                }
                step *= 0.5;
            }
            if !accepted {
                return Err(Error::Numerical {
                    what: "Euler-Lagrange line search",
                    detail: "no step reduced the constrained merit function".into(),
                    value: merit,
                });
            }
            asm = self.assemble(&z, true)?;
        }
        let stat = self.stationarity(&asm.grad, &asm.cj);
        Err(Error::Numerical {
            what: "Euler-Lagrange iteration",
            detail: format!(
                "no convergence in {EL_MAX_ITERATIONS} iterations \
                 (stationarity {stat:.3e}, constraint {:.3e})",
                asm.c.amax()
            ),
            value: stat,
        })
    }

    /// Trapezoid action of the solved nodes under this problem's drift.
    fn node_action(&self, nodes: &[DVector<f64>]) -> Result<f64> {
        let times: Vec<f64> = (0..=self.k_steps).map(|k| k as f64 * self.delta).collect();
        let mut flat = Vec::with_capacity(nodes.len() * self.dim);
        for x in nodes {
            flat.extend_from_slice(x.as_slice());
        }
        let phidot = fd_velocities(&times, &flat, self.dim);
        let mut action = 0.0;
        for k in 0..=self.k_steps {
            let f1 = self.f1(times[k], &nodes[k])?;
            let v1 = DVector::from_column_slice(&phidot[k * self.dim..k * self.dim + self.d]);
            let w = solve_sigma(&self.spec.sigma(times[k], &nodes[k]), &(f1 - v1))?;
            let weight = if k == 0 || k == self.k_steps { 0.5 } else { 1.0 };
            action += weight * self.delta * 0.5 * w.norm_squared();
        }
        Ok(action)
    }
}

/// Small helper: add a block into a matrix view (nalgebra has no
/// `+=` between views of different storage).
trait AddAssignBlock {
    fn add_assign_block(&mut self, block: &DMatrix<f64>);
}

impl AddAssignBlock for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign_block(&mut self, block: &DMatrix<f64>) {
        debug_assert_eq!(self.nrows(), block.nrows());
        debug_assert_eq!(self.ncols(), block.ncols());
        for j in 0..block.ncols() {
            for i in 0..block.nrows() {
                self[(i, j)] += block[(i, j)];
            }
        }
    }
}

/// Solves the two-point boundary-value problem for the extreme trajectories
/// of the free or transformed action on a uniform grid of `n_steps`
/// intervals.  The deterministic blocks are hard constraints: infeasible
/// terminal states are refused rather than approximated.
pub fn solve_euler_lagrange(
    spec: &ChainSpec,
    kind: LagrangianKind<'_>,
    phi0: &DVector<f64>,
    phi_t: &DVector<f64>,
    n_steps: usize,
) -> Result<ExtremalPath> {
    let h = match kind {
        LagrangianKind::Free => None,
        LagrangianKind::Transformed(h) => Some(h),
    };
    let problem = ReducedProblem::new(spec, h, phi0.clone(), phi_t.clone(), n_steps)?;
    let (_, asm, stat) = problem.solve()?;
    let action = problem.node_action(&asm.nodes)?;
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * problem.delta).collect();
    Ok(ExtremalPath::from_nodes(problem.d, problem.dim, times, &asm.nodes, action, stat))
}

// ---------------------------------------------------------------------------
// Tube probabilities
// ---------------------------------------------------------------------------

/// Monte Carlo tube-probability ratio for two paths with a common start.
#[derive(Clone, Debug, Serialize)]
pub struct TubeRatioReport {
    pub epsilon: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub hits_a: u64,
    pub hits_b: u64,
    pub hits_joint: u64,
    /// Empirical `P(tube A) / P(tube B)`.
    pub ratio: f64,
    /// Delta-method standard error of the ratio, accounting for the
    /// correlation induced by counting both tubes on the same sample.
    pub stderr: f64,
    /// Small-tube prediction `exp(action_b - action_a)`.
    pub prediction: f64,
    pub action_a: f64,
    pub action_b: f64,
}

/// Simulates the uncontrolled chain from the common start of `paths` and
/// returns, per reference path, the sup over simulation times of the
/// Euclidean distance to it, one entry per Monte Carlo path.  The sweep is
/// shared: all radii and all reference paths are measured on the same
/// sample, so ratios at different radii are directly comparable.
pub fn tube_sup_distances(
    spec: &ChainSpec,
    paths: &[&ExtremalPath],
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if paths.is_empty() {
        return Err(Error::InvalidSpec("tube sweep needs at least one reference path".into()));
    }
    let dim = spec.dim();
    let d = spec.d();
    if n_paths == 0 {
        return Err(Error::InvalidSpec("tube sweep needs at least one Monte Carlo path".into()));
    }
    if !(dt.is_finite() && dt > 0.0 && dt <= spec.horizon()) {
        return Err(Error::InvalidSpec(format!("step size must lie in (0, {}], got {dt}", spec.horizon())));
    }
    let x0 = paths[0].state_at(0.0);
    for (i, p) in paths.iter().enumerate() {
        if p.dim() != dim {
            return Err(Error::InvalidSpec(format!(
                "reference path {i} has dimension {}, expected {dim}",
                p.dim()
            )));
        }
        let gap = (p.state_at(0.0) - &x0).norm();
        if gap > 1e-9 * (1.0 + x0.norm()) {
            return Err(Error::InvalidSpec(format!(
                "tube ratios need a common start; path {i} deviates by {gap:.3e}"
            )));
        }
        if (p.times().last().copied().unwrap_or(0.0) - spec.horizon()).abs()
            > 1e-9 * (1.0 + spec.horizon())
        {
            return Err(Error::InvalidSpec(format!("reference path {i} does not span the horizon")));
        }
    }
    let n_steps = ((spec.horizon() / dt).round() as usize).max(1);
    let dt_eff = spec.horizon() / n_steps as f64;
    let sqrt_dt = dt_eff.sqrt();
    // Reference states sampled once on the simulation grid.
    let sampled: Vec<Vec<DVector<f64>>> = paths
        .iter()
        .map(|p| (0..=n_steps).map(|j| p.state_at(j as f64 * dt_eff)).collect())
        .collect();
    let blowup = 1e8 * (1.0 + x0.norm());

    let per_path = par::try_map_indexed(n_paths, |p| -> Result<Vec<f64>> {
        let mut rng = stream_rng(seed, StreamDomain::Tube, 0, p as u64);
        let mut x = x0.clone();
        let mut sups = vec![0.0_f64; paths.len()];
        for (e, refs) in sampled.iter().enumerate() {
            sups[e] = (&x - &refs[0]).norm();
        }
        for j in 0..n_steps {
            let t = j as f64 * dt_eff;
            let m = spec.drift(t, &x);
            let sigma = spec.sigma(t, &x);
            let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            x += m * dt_eff;
            x.rows_mut(0, d).axpy(sqrt_dt, &(sigma * xi), 1.0);
            let x_norm = x.norm();
            if !x_norm.is_finite() || x_norm > blowup {
                return Err(Error::TrajectoryBlowUp { path: p, t, x_norm });
            }
            for (e, refs) in sampled.iter().enumerate() {
                let dist = (&x - &refs[j + 1]).norm();
                if dist > sups[e] {
                    sups[e] = dist;
                }
            }
        }
        Ok(sups)
    })?;

    let mut out = vec![Vec::with_capacity(n_paths); paths.len()];
    for sups in &per_path {
        for (e, s) in sups.iter().enumerate() {
            out[e].push(*s);
        }
    }
    Ok(out)
}

/// Counts uncontrolled sample paths staying within radius `epsilon` of each
/// reference path and reports the count ratio next to the action-gap
/// prediction.  Identical references give ratio one with zero error
/// exactly; tubes with fewer than [`TUBE_MIN_HITS`] hits are refused.
pub fn tube_probability_ratio(
    spec: &ChainSpec,
    phi_a: &ExtremalPath,
    phi_b: &ExtremalPath,
    epsilon: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<TubeRatioReport> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidSpec(format!("tube radius must be positive, got {epsilon}")));
    }
    let sups = tube_sup_distances(spec, &[phi_a, phi_b], n_paths, dt, seed)?;
    let mut hits_a = 0u64;
    let mut hits_b = 0u64;
    let mut hits_joint = 0u64;
    for p in 0..n_paths {
        let in_a = sups[0][p] <= epsilon;
        let in_b = sups[1][p] <= epsilon;
        hits_a += in_a as u64;
        hits_b += in_b as u64;
        hits_joint += (in_a && in_b) as u64;
    }
    let fewest = hits_a.min(hits_b);
    if fewest < TUBE_MIN_HITS {
        return Err(Error::InsufficientStatistics { hits: fewest, required: TUBE_MIN_HITS });
    }
    let n = n_paths as f64;
    let p_a = hits_a as f64 / n;
    let p_b = hits_b as f64 / n;
    let p_ab = hits_joint as f64 / n;
    let ratio = p_a / p_b;
    // Delta method on log(p_a/p_b) with the joint-count covariance.
    let var_log = ((1.0 - p_a) / (n * p_a) + (1.0 - p_b) / (n * p_b)
        - 2.0 * (p_ab - p_a * p_b) / (n * p_a * p_b))
        .max(0.0);
    Ok(TubeRatioReport {
        epsilon,
        n_paths,
        dt,
        seed,
        hits_a,
        hits_b,
        hits_joint,
        ratio,
        stderr: ratio * var_log.sqrt(),
        prediction: (phi_b.action() - phi_a.action()).exp(),
        action_a: phi_a.action(),
        action_b: phi_b.action(),
    })
}

// ---------------------------------------------------------------------------
// Invariance of extremals under harmonic reweighting
// ---------------------------------------------------------------------------

/// Outcome of the extremal-invariance check for one boundary pair.
#[derive(Clone, Debug, Serialize)]
pub struct Prop6Report {
    pub n_steps: usize,
    /// Largest backward-equation residual over the probe set.
    pub gate_max_residual: f64,
    pub gate_passed: bool,
    /// True when the gate was skipped on request.
    pub forced: bool,
    /// Sup node distance between the free and the transformed extremal.
    pub sup_distance: f64,
    /// Discretisation-order allowance the distance is held against.
    pub tolerance: f64,
    pub pass: bool,
    /// Stationarity of the transformed extremal in the free problem.
    pub cross_residual_in_free: f64,
    /// Stationarity of the free extremal in the transformed problem.
    pub cross_residual_in_transformed: f64,
    pub action_free: f64,
    pub action_transformed: f64,
    pub path_free: ExtremalPath,
    pub path_transformed: ExtremalPath,
}

/// Probes the backward equation for `h` at interior times along the segment
/// between the boundary states (with coordinate offsets): returns the
/// largest residual, with failures of the evaluation itself counted as
/// infinite residual.
fn gate_residual(
    spec: &ChainSpec,
    h: &HField,
    phi0: &DVector<f64>,
    phi_t: &DVector<f64>,
    lenient: bool,
) -> Result<f64> {
    let horizon = spec.horizon();
    let dim = spec.dim();
    let mut worst = 0.0_f64;
    for frac in [0.2, 0.35, 0.5, 0.65, 0.8] {
        let t = frac * horizon;
        let base = phi0 * (1.0 - frac) + phi_t * frac;
        let offset = 0.2 * (1.0 + base.amax());
        let mut probes = vec![base.clone()];
        for i in [0, dim - 1] {
            let mut shifted = base.clone();
            shifted[i] += offset;
            probes.push(shifted);
        }
        for x in &probes {
            let res = match hjb_residual(h, spec, t, x, PROP6_GATE_FD_STEP) {
                Ok(r) => r.abs(),
                Err(err) if lenient => {
                    let _ = err;
                    f64::INFINITY
                }
                Err(err) => return Err(err),
            };
            worst = worst.max(res);
        }
    }
    Ok(worst)
}

/// Verifies that reweighting by `h` leaves the extreme trajectories between
/// `phi0` and `phi_t` unchanged.  The field must first pass the
/// backward-equation probe — for fields that do not solve the backward
/// equation the invariance fails, and the check refuses to certify them
/// unless `force` is set (used deliberately as a negative control).
pub fn prop6_check(
    spec: &ChainSpec,
    h: &HField,
    phi0: &DVector<f64>,
    phi_t: &DVector<f64>,
    n_steps: usize,
    force: bool,
) -> Result<Prop6Report> {
    let gate_max_residual = gate_residual(spec, h, phi0, phi_t, force)?;
    let gate_passed = gate_max_residual <= PROP6_RESIDUAL_GATE;
    if !gate_passed && !force {
        return Err(Error::PreconditionViolated(format!(
            "h does not satisfy the backward equation: probe residual {gate_max_residual:.3e} \
             exceeds the gate {PROP6_RESIDUAL_GATE:.1e}"
        )));
    }

    let free_problem = ReducedProblem::new(spec, None, phi0.clone(), phi_t.clone(), n_steps)?;
    let (z_free, asm_free, stat_free) = free_problem.solve()?;
    let trans_problem = ReducedProblem::new(spec, Some(h), phi0.clone(), phi_t.clone(), n_steps)?;
    let (z_trans, asm_trans, stat_trans) = trans_problem.solve()?;

    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * free_problem.delta).collect();
    let path_free = ExtremalPath::from_nodes(
        free_problem.d,
        free_problem.dim,
        times.clone(),
        &asm_free.nodes,
        free_problem.node_action(&asm_free.nodes)?,
        stat_free,
    );
    let path_transformed = ExtremalPath::from_nodes(
        trans_problem.d,
        trans_problem.dim,
        times,
        &asm_trans.nodes,
        trans_problem.node_action(&asm_trans.nodes)?,
        stat_trans,
    );

    let sup_distance = path_free.sup_distance(&path_transformed)?;
    let path_scale = 1.0
        + path_free
            .phi
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let tolerance = PROP6_SUP_TOL_AT_REFERENCE
        * (PROP6_REFERENCE_STEPS / n_steps as f64).powi(2)
        * path_scale;
    let cross_residual_in_free = free_problem.stationarity_at(&z_trans)?;
    let cross_residual_in_transformed = trans_problem.stationarity_at(&z_free)?;

    Ok(Prop6Report {
        n_steps,
        gate_max_residual,
        gate_passed,
        forced: force && !gate_passed,
        sup_distance,
        tolerance,
        pass: gate_passed && sup_distance <= tolerance,
        cross_residual_in_free,
        cross_residual_in_transformed,
        action_free: path_free.action(),
        action_transformed: path_transformed.action(),
        path_free,
        path_transformed,
    })
}
