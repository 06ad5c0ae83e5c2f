//! Chain-of-subsystems diffusion models.
//!
//! The state stacks `n` blocks of dimension `d`, `x = (x^1, ..., x^n)`, and
//! evolves as
//!
//! ```text
//! dx^1 = m_1(t, x^1, ..., x^n) dt + sigma(t, x) dW      (d-dim noise)
//! dx^j = m_j(t, x^{j-1}, ..., x^n) dt                   (j = 2..n)
//! ```
//!
//! so noise enters only the first block and the couplings are lower-block
//! triangular one step below the diagonal: block `j >= 2` may read blocks
//! `j-1..n` but nothing earlier. That cascade is what carries noise (and
//! control) down the chain and makes the degenerate diffusion hypoelliptic.
//! The infinitesimal generator is
//!
//! ```text
//! L f = 1/2 tr(a(t,x) D^2_{x^1} f) + sum_j m_j(t,x) . D_{x^j} f,     a = sigma sigma^T.
//! ```
//!
//! [`ChainSpec`] wraps black-box drift/noise evaluators; because closures
//! cannot be introspected, the structural invariants are *checked by probing*
//! ([`validate_chain`]) rather than assumed. [`LinearChainSpec`] is the
//! constant-coefficient subclass `M(t,x) = A x`, `sigma` constant, whose block
//! sparsity is verified exactly and which admits closed-form kernels.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative size of the probe perturbation used by the block-dependency check.
pub const DEPENDENCY_PERTURBATION: f64 = 1e-3;
/// A forbidden-block response above `DEPENDENCY_TOL * (1 + |m_j|)` fails validation.
pub const DEPENDENCY_TOL: f64 = 1e-10;
/// Default finite-difference step scale for [`apply_generator`].
pub const GENERATOR_FD_SCALE: f64 = 1e-4;
/// Singular values below `RANK_TOL * sigma_max` count as zero in the
/// controllability rank check.
pub const RANK_TOL: f64 = 1e-10;

pub type DriftFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type SigmaFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A (possibly nonlinear) chain diffusion given by evaluators.
#[derive(Clone)]
pub struct ChainSpec {
    n: usize,
    d: usize,
    horizon: f64,
    lambda_min: f64,
    drift: DriftFn,
    sigma: SigmaFn,
    /// Set when `sigma` is state-independent; simulation hot loops use it to
    /// skip per-step evaluation.
    constant_sigma: Option<DMatrix<f64>>,
}

impl std::fmt::Debug for ChainSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChainSpec")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("horizon", &self.horizon)
            .field("lambda_min", &self.lambda_min)
            .field("constant_sigma", &self.constant_sigma.is_some())
            .finish()
    }
}

impl ChainSpec {
    /// Wraps drift and noise evaluators. `lambda_min` is the claimed uniform
    /// ellipticity constant of `sigma sigma^T` on the first block; it is
    /// spot-checked here at `(0, 0)` and probed more thoroughly by
    /// [`validate_chain`].
    pub fn new(
        n: usize,
        d: usize,
        horizon: f64,
        lambda_min: f64,
        drift: DriftFn,
        sigma: SigmaFn,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSpec(format!("chain needs n >= 2 subsystems, got {n}")));
        }
        if d < 1 {
            return Err(Error::InvalidSpec("block dimension must be positive".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidSpec(format!("horizon must be positive, got {horizon}")));
        }
        if !(lambda_min.is_finite() && lambda_min > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "ellipticity constant must be positive, got {lambda_min}"
            )));
        }
        let x0 = DVector::zeros(n * d);
        let m = drift(0.0, &x0);
        if m.len() != n * d {
            return Err(Error::InvalidSpec(format!(
                "drift returns dimension {}, expected {}",
                m.len(),
                n * d
            )));
        }
        let s = sigma(0.0, &x0);
        if s.nrows() != d || s.ncols() != d {
            return Err(Error::InvalidSpec(format!(
                "sigma returns {}x{}, expected {d}x{d}",
                s.nrows(),
                s.ncols()
            )));
        }
        Ok(Self { n, d, horizon, lambda_min, drift, sigma, constant_sigma: None })
    }

    /// Assembles the drift from per-block evaluators `m_j(t, x) -> R^d`
    /// (each receives the full state; the dependency restriction is a promise
    /// checked by [`validate_chain`]).
    pub fn from_blocks(
        n: usize,
        d: usize,
        horizon: f64,
        lambda_min: f64,
        blocks: Vec<DriftFn>,
        sigma: SigmaFn,
    ) -> Result<Self> {
        if blocks.len() != n {
            return Err(Error::InvalidSpec(format!(
                "got {} drift blocks for a chain of {n} subsystems",
                blocks.len()
            )));
        }
        let blocks = Arc::new(blocks);
        let drift: DriftFn = Arc::new(move |t, x| {
            let mut m = DVector::zeros(blocks.len() * d);
            for (j, b) in blocks.iter().enumerate() {
                m.rows_mut(j * d, d).copy_from(&b(t, x));
            }
            m
        });
        Self::new(n, d, horizon, lambda_min, drift, sigma)
    }

    /// Declares `sigma` constant, enabling exact fast paths.
    pub fn with_constant_sigma(mut self, sigma: DMatrix<f64>) -> Self {
        self.constant_sigma = Some(sigma);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Full state dimension `n * d`.
    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(t, x)
    }

    /// Drift of block `j` (1-indexed).
    pub fn drift_block(&self, t: f64, x: &DVector<f64>, j: usize) -> DVector<f64> {
        debug_assert!((1..=self.n).contains(&j));
        self.drift(t, x).rows((j - 1) * self.d, self.d).into_owned()
    }

    pub fn sigma(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(s) = &self.constant_sigma {
            s.clone()
        } else {
            (self.sigma)(t, x)
        }
    }

    pub fn constant_sigma(&self) -> Option<&DMatrix<f64>> {
        self.constant_sigma.as_ref()
    }

    /// Diffusion matrix `a = sigma sigma^T` of the first block.
    pub fn diffusion(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let s = self.sigma(t, x);
        &s * s.transpose()
    }
}

/// A linear chain `dx = A x dt + G sigma0 dW` with constant coefficients.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearChainSpec {
    n: usize,
    d: usize,
    horizon: f64,
    a_matrix: DMatrix<f64>,
    sigma0: DMatrix<f64>,
    lambda_min: f64,
}

impl LinearChainSpec {
    /// Validates dimensions, the one-sub-diagonal block sparsity of `A`, and
    /// positive-definiteness of `sigma0 sigma0^T`; the ellipticity constant is
    /// derived from the latter's smallest eigenvalue.
    pub fn new(n: usize, d: usize, horizon: f64, a_matrix: DMatrix<f64>, sigma0: DMatrix<f64>) -> Result<Self> {
        if n < 2 || d < 1 {
            return Err(Error::InvalidSpec(format!("need n >= 2 and d >= 1, got n={n}, d={d}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidSpec(format!("horizon must be positive, got {horizon}")));
        }
        let nd = n * d;
        if a_matrix.nrows() != nd || a_matrix.ncols() != nd {
            return Err(Error::InvalidSpec(format!(
                "A is {}x{}, expected {nd}x{nd}",
                a_matrix.nrows(),
                a_matrix.ncols()
            )));
        }
        if sigma0.nrows() != d || sigma0.ncols() != d {
            return Err(Error::InvalidSpec(format!(
                "sigma0 is {}x{}, expected {d}x{d}",
                sigma0.nrows(),
                sigma0.ncols()
            )));
        }
        // Block row j (1-indexed, j >= 2) may only read blocks j-1..n.
        for j in 2..=n {
            for k in 1..j - 1 {
                let block = a_matrix.view(((j - 1) * d, (k - 1) * d), (d, d));
                if block.amax() != 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "A couples block {j} to block {k}; chain structure allows only blocks {}..{n}",
                        j - 1
                    )));
                }
            }
        }
        let a0 = &sigma0 * sigma0.transpose();
        let (lo, _) = linalg::symmetric_eig_range(&a0);
        if lo <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "sigma0 sigma0^T must be positive definite; smallest eigenvalue {lo:e}"
            )));
        }
        Ok(Self { n, d, horizon, a_matrix, sigma0, lambda_min: lo })
    }

    /// `n = 2`, `d = 1`: Brownian velocity integrated into position.
    pub fn double_integrator(horizon: f64) -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        Self::new(2, 1, horizon, a, DMatrix::identity(1, 1)).expect("preset is valid")
    }

    /// `n = 3`, `d = 1`: twice-integrated Brownian noise.
    pub fn triple_integrator(horizon: f64) -> Self {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        Self::new(3, 1, horizon, a, DMatrix::identity(1, 1)).expect("preset is valid")
    }

    /// `n = 2`, `d = 1` with damping `-gamma` on the noisy block.
    pub fn damped_chain(gamma: f64, horizon: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::InvalidSpec("damping must be finite".into()));
        }
        let a = DMatrix::from_row_slice(2, 2, &[-gamma, 0.0, 1.0, 0.0]);
        Self::new(2, 1, horizon, a, DMatrix::identity(1, 1))
    }

    /// Resolves a preset by name (the CLI surface).
    pub fn preset(name: &str, horizon: f64) -> Result<Self> {
        match name {
            "double_integrator" => Ok(Self::double_integrator(horizon)),
            "triple_integrator" => Ok(Self::triple_integrator(horizon)),
            "damped_chain" => Self::damped_chain(0.5, horizon),
            other => Err(Error::InvalidSpec(format!(
                "unknown preset '{other}' (available: double_integrator, triple_integrator, damped_chain)"
            ))),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a_matrix
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    /// Same model as a black-box [`ChainSpec`].
    pub fn to_chain_spec(&self) -> ChainSpec {
        let a = self.a_matrix.clone();
        let drift: DriftFn = Arc::new(move |_t, x| &a * x);
        let s0 = self.sigma0.clone();
        let sigma: SigmaFn = Arc::new(move |_t, _x| s0.clone());
        ChainSpec::new(self.n, self.d, self.horizon, self.lambda_min, drift, sigma)
            .expect("validated linear spec converts cleanly")
            .with_constant_sigma(self.sigma0.clone())
    }
}

/// The noise embedding `G = [I_d, 0, ..., 0]^T` mapping `R^d` into the first
/// block of `R^{nd}`.
pub fn embedding_matrix(n: usize, d: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n * d, d);
    for i in 0..d {
        g[(i, i)] = 1.0;
    }
    g
}

/// What one probe of [`validate_chain`] looked at and how it went.
#[derive(Debug, Clone)]
pub struct Finding {
    pub check: CheckKind,
    pub passed: bool,
    pub detail: String,
    /// Probe location (time, state) for reproducing the failure.
    pub t: f64,
    pub x: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    /// Drift and noise return finite values.
    Totality,
    /// `sigma sigma^T >= lambda_min I` on the first block.
    Ellipticity,
    /// Block `j >= 2` ignores blocks `1..j-2`.
    BlockDependency,
    /// Finite local difference quotients of the drift.
    LocalLipschitz,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.findings.iter().all(|f| f.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| !f.passed)
    }
}

/// Probes the chain-structure invariants at `n_probes` random space-time
/// points: totality, uniform ellipticity of the noise block, the block
/// dependency pattern (by finite perturbations of forbidden blocks), and
/// finiteness of local Lipschitz quotients. Evaluators are black boxes, so
/// a passing report is evidence, not proof.
pub fn validate_chain(spec: &ChainSpec, n_probes: usize, seed: u64) -> ValidationReport {
    use rand::Rng;
    let mut rng = crate::rng::stream_rng(seed, crate::rng::StreamDomain::Kernel, 0, 0);
    let nd = spec.dim();
    let d = spec.d();
    let mut findings = Vec::new();

    for _ in 0..n_probes.max(1) {
        let t = rng.random::<f64>() * spec.horizon();
        let x = DVector::from_fn(nd, |_, _| {
            3.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });

        let m = spec.drift(t, &x);
        let s = spec.sigma(t, &x);
        let total_ok = m.iter().all(|v| v.is_finite()) && s.iter().all(|v| v.is_finite());
        findings.push(Finding {
            check: CheckKind::Totality,
            passed: total_ok,
            detail: if total_ok {
                "drift and sigma finite".into()
            } else {
                "non-finite drift or sigma output".into()
            },
            t,
            x: x.clone(),
        });
        if !total_ok {
            continue; // remaining checks would just cascade NaNs
        }

        let a = &s * s.transpose();
        let (lo, _) = linalg::symmetric_eig_range(&a);
        let ell_ok = lo >= spec.lambda_min() - 1e-12 * spec.lambda_min().max(1.0);
        findings.push(Finding {
            check: CheckKind::Ellipticity,
            passed: ell_ok,
            detail: format!("lambda_min(sigma sigma^T) = {lo:e}, claimed {:e}", spec.lambda_min()),
            t,
            x: x.clone(),
        });

        // Forbidden-block probes: perturbing block k < j-1 must leave m_j fixed.
        for j in 2..=spec.n() {
            let mj = m.rows((j - 1) * d, d);
            for k in 1..j - 1 {
                let mut xp = x.clone();
                for i in 0..d {
                    let idx = (k - 1) * d + i;
                    xp[idx] += DEPENDENCY_PERTURBATION * (1.0 + xp[idx].abs());
                }
                let mp = spec.drift(t, &xp);
                let delta = (mp.rows((j - 1) * d, d) - mj).amax();
                let bound = DEPENDENCY_TOL * (1.0 + mj.amax());
                findings.push(Finding {
                    check: CheckKind::BlockDependency,
                    passed: delta <= bound,
                    detail: format!(
                        "block {j} responded {delta:e} to a perturbation of forbidden block {k} (bound {bound:e})"
                    ),
                    t,
                    x: x.clone(),
                });
            }
        }

        // Local Lipschitz probe: difference quotient along a random direction.
        let dir = DVector::from_fn(nd, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let dir = &dir / dir.norm().max(1e-300);
        let h = 1e-4 * (1.0 + x.norm());
        let quotient = (spec.drift(t, &(&x + h * &dir)) - &m).norm() / h;
        findings.push(Finding {
            check: CheckKind::LocalLipschitz,
            passed: quotient.is_finite(),
            detail: format!("difference quotient {quotient:e}"),
            t,
            x,
        });
    }
    ValidationReport { findings }
}

/// Applies the generator `L` to a scalar observable `f` at `(t, x)` by central
/// finite differences:
///
/// ```text
/// L f = 1/2 tr(a D^2_{x^1} f) + M . D_x f .
/// ```
///
/// `fd_step` defaults to `1e-4 * (1 + |x|)`.
pub fn apply_generator(
    spec: &ChainSpec,
    f: &dyn Fn(&DVector<f64>) -> f64,
    t: f64,
    x: &DVector<f64>,
    fd_step: Option<f64>,
) -> Result<f64> {
    let nd = spec.dim();
    let d = spec.d();
    if x.len() != nd {
        return Err(Error::InvalidSpec(format!("state has dim {}, spec needs {nd}", x.len())));
    }
    let h = fd_step.unwrap_or(GENERATOR_FD_SCALE * (1.0 + x.norm()));
    let fx = f(x);

    let mut grad = DVector::zeros(nd);
    let mut probe = x.clone();
    for i in 0..nd {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }

    // Hessian only on the noisy block.
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * fx + fm) / (h * h);
        for j in (i + 1)..d {
            let mut corner = |si: f64, sj: f64| {
                probe[i] = x[i] + si * h;
                probe[j] = x[j] + sj * h;
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                + corner(-1.0, -1.0))
                / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }

    let a = spec.diffusion(t, x);
    let m = spec.drift(t, x);
    let value = 0.5 * (&a * &hess).trace() + m.dot(&grad);
    if !value.is_finite() {
        return Err(Error::EvaluatorFailure { what: "generator application", t, x_norm: x.norm() });
    }
    Ok(value)
}

/// Controllability diagnostics from [`kalman_rank_check`].
#[derive(Debug, Clone)]
pub struct KalmanReport {
    pub rank: usize,
    pub full_rank: bool,
    pub singular_values: Vec<f64>,
}

/// Rank of the controllability matrix `[B, AB, ..., A^{nd-1}B]` with
/// `B = G sigma0`. Full rank is the finite-dimensional surrogate for
/// hypoellipticity: it certifies that noise entering the first block excites
/// every direction of the chain, so Gramians are nonsingular.
pub fn kalman_rank_check(spec: &LinearChainSpec) -> KalmanReport {
    let nd = spec.dim();
    let d = spec.d();
    let b = embedding_matrix(spec.n(), d) * spec.sigma0();
    let mut blocks = DMatrix::zeros(nd, nd * d);
    let mut power = b.clone();
    for k in 0..nd {
        blocks.view_mut((0, k * d), (nd, d)).copy_from(&power);
        power = spec.a_matrix() * &power;
    }
    let svd = blocks.svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > RANK_TOL * smax).count();
    KalmanReport {
        rank,
        full_rank: rank == nd,
        singular_values: svd.singular_values.iter().copied().collect(),
    }
}
