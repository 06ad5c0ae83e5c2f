//! Minimum-energy distribution steering for degenerate chain-of-subsystems
//! diffusions.
//!
//! The plant is a chain of `n` interconnected subsystems, each with state in
//! `R^d`, where Brownian noise enters only the first block and propagates down
//! the chain through the drift couplings:
//!
//! ```text
//! dx^1_t = m_1(t, x^1, ..., x^n) dt + sigma(t, x) dW_t
//! dx^j_t = m_j(t, x^{j-1}, ..., x^n) dt              (j = 2..n)
//! ```
//!
//! Equivalently `dx_t = M(t, x_t) dt + G sigma(t, x_t) dW_t` with the
//! embedding `G = [I_d, 0, ..., 0]^T`. Although the diffusion matrix
//! `G a G^T` (with `a = sigma sigma^T`) is singular, the chain structure makes
//! the process hypoelliptic: smooth transition densities `q(s, x, t, y)` exist
//! and noise reaches every block through the couplings.
//!
//! Given an initial law `mu_0` and a target law `mu_T`, the steering problem
//! asks for a feedback control `u`, entering through the same channel as the
//! noise, that moves the state law from `mu_0` to `mu_T` over `[0, T]` while
//! minimizing the expected control energy
//!
//! ```text
//! J(u) = E \int_0^T 1/2 ||u(t, x_t)||^2_{a^{-1}} dt .
//! ```
//!
//! The optimal control is a Doob h-transform: `u*(t, x) = a D_{x^1} log h(t, x)`
//! where `h` solves the backward Kolmogorov equation with terminal data chosen
//! so that the transformed process hits `mu_T`. For general initial laws the
//! terminal data comes from a Schrodinger system, a coupled pair of measures
//! solved here by iterative proportional fitting. The minimum energy equals a
//! relative-entropy difference between `mu_T`, `mu_0`, and the uncontrolled
//! flow, which is what the [`costs`] module verifies by simulation.
//!
//! Module map:
//! - [`chain`]: chain specifications, generator application, controllability.
//! - [`kernels`]: closed-form Gaussian kernels for linear chains, Monte Carlo
//!   kernels with mollified terminal statistics for nonlinear chains.
//! - [`schrodinger`]: Schrodinger systems on grids and relative entropy.
//! - [`htransform`]: h-fields, optimal controls, controlled simulation,
//!   martingale diagnostics.
//! - [`costs`]: control-energy estimates and the entropy-cost identities.
//! - [`extremal`]: Onsager-Machlup action, extremal paths, tube probabilities.
//!
//! Monte Carlo loops are data-parallel via rayon when the `parallel` feature
//! (on by default) is enabled; the sequential fallback produces bit-identical
//! results because every path owns a counter-derived RNG stream and reductions
//! run in fixed index order.

pub mod chain;
pub mod costs;
pub mod error;
pub mod extremal;
pub mod grid;
pub mod htransform;
pub mod kernels;
pub mod measure;
pub mod schrodinger;
pub mod stats;

pub(crate) mod linalg;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
