//! The experiment config document and its resolution into library objects.
//!
//! A config is a single JSON document so that runs are language-neutral and
//! hashable. The seed is mandatory — there is no wall-clock default — and a
//! `--seed` flag override is folded into the document before anything runs,
//! so the config embedded in artifacts is exactly the one that executed.
//!
//! Only linear chain models are expressible (named presets or an inline
//! `A`/`sigma0` pair): drift evaluators are code, not data, and belong to
//! library callers.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use hypobridge::chain::{ChainSpec, LinearChainSpec};
use hypobridge::grid::{Axis, Grid};
use hypobridge::htransform::{build_h_gaussian_ratio, HField, SimOptions};
use hypobridge::measure::{GaussianMeasure, GridMeasure};

use crate::{CliError, CliResult, SCHEMA_VERSION};

/// Root of the config document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub marginals: Option<MarginalsConfig>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    pub sim: SimConfig,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub extremal: Option<ExtremalConfig>,
    #[serde(default)]
    pub outputs: OutputsConfig,
}

/// A named preset or an inline linear chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelConfig {
    Preset {
        preset: String,
        horizon: f64,
        /// Damping for the `damped_chain` preset; ignored otherwise.
        #[serde(default)]
        gamma: Option<f64>,
    },
    Linear {
        n: usize,
        d: usize,
        horizon: f64,
        a_matrix: Vec<Vec<f64>>,
        sigma0: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalsConfig {
    pub mu0: MarginalConfig,
    pub mu_t: MarginalConfig,
}

/// One marginal. The `grid_*` forms discretize onto the config's lattice and
/// require the `grid` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MarginalConfig {
    /// Point mass.
    Dirac { dirac: Vec<f64> },
    /// Full-support Gaussian.
    Gaussian { gaussian: GaussianParams },
    /// Unit mass on the lattice node nearest the given point.
    GridDirac { grid_dirac: Vec<f64> },
    /// Gaussian density sampled at the nodes and renormalized.
    GridGaussian { grid_gaussian: GaussianParams },
    /// Raw nonnegative node weights, one per lattice node.
    GridWeights { grid_weights: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub axes: Vec<AxisConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 5000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub n_paths: usize,
    /// Mandatory: reproducibility is part of the artifact contract.
    pub seed: u64,
    /// Optional cap on the applied control norm near the terminal time.
    #[serde(default)]
    pub control_cap: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum KernelMethod {
    /// Closed-form Gaussian kernel (linear models).
    Exact,
    /// Monte Carlo lattice kernel; requires the `grid` section.
    Mc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub method: KernelMethod,
    /// Start of the kernel interval; defaults to 0.
    #[serde(default)]
    pub s: f64,
    /// End of the kernel interval; defaults to the model horizon.
    #[serde(default)]
    pub t: Option<f64>,
    /// Mollifier width for the `mc` method; defaults to twice the largest
    /// grid spacing.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Source points for the `mc` method, snapped to their nearest lattice
    /// nodes; defaults to the origin.
    #[serde(default)]
    pub source_points: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtremalConfig {
    pub phi0: Vec<f64>,
    pub phi_t: Vec<f64>,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    /// Run the invariance probe against a deliberately wrong reweighting
    /// field (built for a chain with doubled coupling) and expect rejection.
    #[serde(default)]
    pub negative_control: bool,
}

fn default_n_steps() -> usize {
    512
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsConfig {
    /// Output directory when the `--out` flag is absent.
    pub dir: Option<String>,
    /// Also write the controlled terminal ensemble as CSV.
    pub write_terminal: bool,
}

/// Reads and parses the config document. Parse failures, including an empty
/// file, are config errors.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
            config.schema_version
        )));
    }
    Ok(config)
}

/// A validated config together with the model and lattice it describes.
pub struct Scenario {
    pub config: ExperimentConfig,
    pub linear: LinearChainSpec,
    pub grid: Option<Arc<Grid>>,
}

/// Applies the seed override, builds the model and the lattice, and checks
/// every cross-section dimension the commands rely on.
pub fn build_scenario(
    mut config: ExperimentConfig,
    seed_override: Option<u64>,
) -> CliResult<Scenario> {
    if let Some(seed) = seed_override {
        config.sim.seed = seed;
    }
    if !(config.sim.dt.is_finite() && config.sim.dt > 0.0) {
        return Err(CliError::Config(format!("sim.dt must be positive, got {}", config.sim.dt)));
    }
    if config.sim.n_paths == 0 {
        return Err(CliError::Config("sim.n_paths must be at least 1".into()));
    }
    if !(config.solver.tol.is_finite() && config.solver.tol > 0.0) {
        return Err(CliError::Config(format!(
            "solver.tol must be positive, got {}",
            config.solver.tol
        )));
    }
    if let Some(cap) = config.sim.control_cap {
        if !(cap.is_finite() && cap > 0.0) {
            return Err(CliError::Config(format!("sim.control_cap must be positive, got {cap}")));
        }
    }

    let linear = build_model(&config.model)?;
    let nd = linear.dim();

    let grid = match &config.grid {
        None => None,
        Some(gc) => {
            if gc.axes.len() != nd {
                return Err(CliError::Config(format!(
                    "grid has {} axes but the model state has dimension {nd}",
                    gc.axes.len()
                )));
            }
            let axes = gc
                .axes
                .iter()
                .map(|a| Axis::new(a.min, a.max, a.nodes))
                .collect::<hypobridge::Result<Vec<_>>>()
                .map_err(|e| CliError::Config(e.to_string()))?;
            Some(Arc::new(Grid::new(axes).map_err(|e| CliError::Config(e.to_string()))?))
        }
    };

    let scenario = Scenario { config, linear, grid };
    if let Some(marginals) = &scenario.config.marginals {
        scenario.check_marginal(&marginals.mu0, "marginals.mu0")?;
        scenario.check_marginal(&marginals.mu_t, "marginals.mu_t")?;
    }
    if let Some(ex) = &scenario.config.extremal {
        if ex.phi0.len() != nd || ex.phi_t.len() != nd {
            return Err(CliError::Config(format!(
                "extremal boundary points must have dimension {nd}, got {} and {}",
                ex.phi0.len(),
                ex.phi_t.len()
            )));
        }
    }
    if let Some(kc) = &scenario.config.kernel {
        let t = kc.t.unwrap_or(scenario.linear.horizon());
        if !(kc.s >= 0.0 && kc.s < t && t <= scenario.linear.horizon()) {
            return Err(CliError::Config(format!(
                "kernel interval must satisfy 0 <= s < t <= horizon, got s={}, t={t}",
                kc.s
            )));
        }
        if kc.method == KernelMethod::Mc && scenario.grid.is_none() {
            return Err(CliError::Config(
                "the mc kernel method estimates lattice densities and needs the grid section"
                    .into(),
            ));
        }
    }
    Ok(scenario)
}

fn build_model(model: &ModelConfig) -> CliResult<LinearChainSpec> {
    match model {
        ModelConfig::Preset { preset, horizon, gamma } => match (preset.as_str(), gamma) {
            ("damped_chain", Some(g)) => LinearChainSpec::damped_chain(*g, *horizon)
                .map_err(|e| CliError::Config(e.to_string())),
            _ => LinearChainSpec::preset(preset, *horizon)
                .map_err(|e| CliError::Config(e.to_string())),
        },
        ModelConfig::Linear { n, d, horizon, a_matrix, sigma0 } => {
            let a = matrix_from_rows(a_matrix, *n * *d, *n * *d, "model.a_matrix")?;
            let s0 = matrix_from_rows(sigma0, *d, *d, "model.sigma0")?;
            LinearChainSpec::new(*n, *d, *horizon, a, s0)
                .map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

pub fn matrix_from_rows(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    what: &str,
) -> CliResult<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Config(format!("{what} must be a {nrows}x{ncols} matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config(format!("{what} has a non-finite entry")));
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

impl Scenario {
    pub fn chain(&self) -> ChainSpec {
        self.linear.to_chain_spec()
    }

    pub fn seed(&self) -> u64 {
        self.config.sim.seed
    }

    pub fn sim_options(&self) -> SimOptions {
        let sim = &self.config.sim;
        let mut opts = SimOptions::new(sim.dt, sim.n_paths, sim.seed);
        if let Some(cap) = sim.control_cap {
            opts.control_cap = cap;
        }
        opts
    }

    pub fn marginals(&self) -> CliResult<&MarginalsConfig> {
        self.config
            .marginals
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs the marginals section".into()))
    }

    pub fn grid(&self) -> CliResult<&Arc<Grid>> {
        self.grid
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs the grid section".into()))
    }

    fn check_marginal(&self, m: &MarginalConfig, what: &str) -> CliResult<()> {
        let nd = self.linear.dim();
        let dim_of = |v: &[f64]| v.len();
        match m {
            MarginalConfig::Dirac { dirac } => {
                if dim_of(dirac) != nd {
                    return Err(CliError::Config(format!(
                        "{what}: point has dimension {}, model has {nd}",
                        dirac.len()
                    )));
                }
            }
            MarginalConfig::Gaussian { gaussian } => {
                self.check_gaussian(gaussian, what)?;
            }
            MarginalConfig::GridDirac { grid_dirac } => {
                self.grid()?;
                if dim_of(grid_dirac) != nd {
                    return Err(CliError::Config(format!(
                        "{what}: point has dimension {}, model has {nd}",
                        grid_dirac.len()
                    )));
                }
            }
            MarginalConfig::GridGaussian { grid_gaussian } => {
                self.grid()?;
                self.check_gaussian(grid_gaussian, what)?;
            }
            MarginalConfig::GridWeights { grid_weights } => {
                let grid = self.grid()?;
                if grid_weights.len() != grid.len() {
                    return Err(CliError::Config(format!(
                        "{what}: {} weights for a lattice of {} nodes",
                        grid_weights.len(),
                        grid.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_gaussian(&self, g: &GaussianParams, what: &str) -> CliResult<()> {
        let nd = self.linear.dim();
        if g.mean.len() != nd {
            return Err(CliError::Config(format!(
                "{what}: mean has dimension {}, model has {nd}",
                g.mean.len()
            )));
        }
        matrix_from_rows(&g.cov, nd, nd, &format!("{what}.cov"))?;
        Ok(())
    }

    /// The point-to-Gaussian steering pair `(x0, target)` when the marginals
    /// take that form; `None` when both marginals live on the lattice.
    pub fn point_to_gaussian(&self) -> CliResult<Option<(DVector<f64>, GaussianMeasure)>> {
        let marginals = self.marginals()?;
        match (&marginals.mu0, &marginals.mu_t) {
            (MarginalConfig::Dirac { dirac }, MarginalConfig::Gaussian { gaussian }) => {
                let x0 = DVector::from_column_slice(dirac);
                let target = self.gaussian_measure(gaussian)?;
                Ok(Some((x0, target)))
            }
            (MarginalConfig::Dirac { .. }, _) | (_, MarginalConfig::Gaussian { .. }) => {
                Err(CliError::Config(
                    "mixed marginal kinds: pair a dirac start with a gaussian target, or use \
                     grid_* forms for both"
                        .into(),
                ))
            }
            _ => Ok(None),
        }
    }

    /// Both marginals as lattice measures when the config uses grid forms.
    pub fn grid_pair(&self) -> CliResult<Option<(GridMeasure, GridMeasure)>> {
        let marginals = self.marginals()?;
        let both_grid = matches!(
            &marginals.mu0,
            MarginalConfig::GridDirac { .. }
                | MarginalConfig::GridGaussian { .. }
                | MarginalConfig::GridWeights { .. }
        ) && matches!(
            &marginals.mu_t,
            MarginalConfig::GridDirac { .. }
                | MarginalConfig::GridGaussian { .. }
                | MarginalConfig::GridWeights { .. }
        );
        if !both_grid {
            return Ok(None);
        }
        Ok(Some((
            self.grid_measure(&marginals.mu0)?,
            self.grid_measure(&marginals.mu_t)?,
        )))
    }

    fn gaussian_measure(&self, g: &GaussianParams) -> CliResult<GaussianMeasure> {
        let nd = self.linear.dim();
        let cov = matrix_from_rows(&g.cov, nd, nd, "gaussian cov")?;
        GaussianMeasure::new(DVector::from_column_slice(&g.mean), cov)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    fn grid_measure(&self, m: &MarginalConfig) -> CliResult<GridMeasure> {
        let grid = self.grid()?.clone();
        match m {
            MarginalConfig::GridDirac { grid_dirac } => {
                let node = grid.nearest_node(&DVector::from_column_slice(grid_dirac));
                let mut weights = vec![0.0; grid.len()];
                weights[node] = 1.0;
                GridMeasure::new(grid, weights).map_err(|e| CliError::Config(e.to_string()))
            }
            MarginalConfig::GridGaussian { grid_gaussian } => {
                let measure = self.gaussian_measure(grid_gaussian)?;
                GridMeasure::from_density(grid, |y| {
                    measure.log_density(y).map(f64::exp).unwrap_or(0.0)
                })
                .map_err(|e| CliError::Config(e.to_string()))
            }
            MarginalConfig::GridWeights { grid_weights } => {
                GridMeasure::new(grid, grid_weights.clone())
                    .map_err(|e| CliError::Config(e.to_string()))
            }
            _ => Err(CliError::Config("marginal is not a lattice form".into())),
        }
    }

    /// The reweighting field for the point-to-Gaussian pair. Construction
    /// failures after validation (degenerate covariance, uncontrollable
    /// model) are numeric failures.
    pub fn ratio_field(&self) -> CliResult<HField> {
        let (x0, target) = self.point_to_gaussian()?.ok_or_else(|| {
            CliError::Config(
                "this command needs dirac-to-gaussian marginals to build the reweighting field"
                    .into(),
            )
        })?;
        Ok(build_h_gaussian_ratio(&self.linear, &GaussianMeasure::dirac(x0), &target)?)
    }
}
