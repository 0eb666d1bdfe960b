//! Experiment configuration: one TOML file with sections mirroring the
//! library modules, and builders that turn the parsed file into runtime
//! types.
//!
//! Design rules:
//!
//! - **Every key has a default.** The empty file parses to the reference
//!   rough-volatility experiment (`hurst = 0.3`, `rho = -0.7`, ATM call,
//!   horizon 1 split into 32 steps, 10^5 paths, 20 outer states at the
//!   mid-horizon node).
//! - **Unknown keys are rejected** in every section, so a typo cannot
//!   silently fall back to a default.
//! - **Builders validate.** Each `ExperimentConfig` accessor revalidates
//!   through the runtime constructors and reports failures as
//!   [`Error::Config`] with the offending section named, which the CLI maps
//!   to its configuration-error exit status.
//!
//! Sections and the modules they mirror:
//!
//! | section        | module      | contents                                  |
//! |----------------|-------------|-------------------------------------------|
//! | `[model]`      | `paths`     | `rho`, `x0`, `v0`, optional tabulated curve |
//! | `[kernel]`     | `kernel`    | kind and parameters of the Volterra kernel |
//! | `[grid]`       | `grid`      | horizon and step count                     |
//! | `[payoff]`     | `valuation` | payoff kind and strike                     |
//! | `[driver]`     | `bsde`      | driver kind and rate                       |
//! | `[basis]`      | `bsde`      | regression basis                           |
//! | `[solver]`     | `bsde`      | conditioning limit, Picard sweeps          |
//! | `[bump]`       | `pathderiv` | bump sizes and differencing scheme         |
//! | `[monte_carlo]`| —           | path counts (outer, inner, derivative)     |
//! | `[verify]`     | `identify`  | state count, test node, pass thresholds    |
//! | `[output]`     | `io` / CLI  | output directory                           |
//!
//! plus top-level `seed` and `workers` (worker thread count; omitted means
//! all available cores).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsde::{BasisSpec, Driver, SolverOptions, RESIDUAL_THRESHOLD};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::identify::{Corruption, IdentitySetup, IdentityThresholds, MartingaleSetup};
use crate::kernel::Kernel;
use crate::pathderiv::{BumpScheme, BumpSpec};
use crate::paths::{ForwardCurve, ModelParams};
use crate::valuation::Payoff;

/// Seed of the reference experiment (`b"VFBL"` read as a little integer).
pub const DEFAULT_SEED: u64 = 0x5646_424c;

fn config_err(section: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("[{section}] {detail}"))
}

/// `[model]`: correlation, initial state, and (optionally) a tabulated
/// initial forward-variance curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Correlation between the variance and price drivers, in `[-1, 1]`.
    pub rho: f64,
    /// Initial log-price.
    pub x0: f64,
    /// Initial variance level; also the flat initial curve when no tabulated
    /// curve is given.
    pub v0: f64,
    /// Tabulated initial forward-variance curve on the grid nodes
    /// (`n_steps + 1` values). Omitted means flat at `v0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_curve: Option<Vec<f64>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            rho: -0.7,
            x0: 100.0_f64.ln(),
            v0: 0.04,
            initial_curve: None,
        }
    }
}

/// Kernel families selectable from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Power-law kernel `scale * sqrt(2 hurst) * lag^(hurst - 1/2)`.
    RiemannLiouville,
    /// Constant kernel `scale`.
    Constant,
    /// Identically zero kernel (deterministic variance).
    Zero,
}

/// `[kernel]`: the Volterra kernel of the variance factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub kind: KernelKind,
    /// Hurst parameter; only read for `riemann_liouville`.
    pub hurst: f64,
    /// Kernel scale; ignored for `zero`.
    pub scale: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            kind: KernelKind::RiemannLiouville,
            hurst: 0.3,
            scale: 0.012,
        }
    }
}

/// `[grid]`: the uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Terminal time.
    pub horizon: f64,
    /// Number of uniform steps.
    pub n_steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            horizon: 1.0,
            n_steps: 32,
        }
    }
}

/// Payoff families selectable from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    Call,
    Put,
    Digital,
    /// The underlying itself (no strike).
    Identity,
}

/// `[payoff]`: the terminal payoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PayoffSection {
    pub kind: PayoffKind,
    /// Strike; ignored for `identity`.
    pub strike: f64,
}

impl Default for PayoffSection {
    fn default() -> Self {
        PayoffSection {
            kind: PayoffKind::Call,
            strike: 100.0,
        }
    }
}

/// Driver families selectable from a config file. Custom drivers are
/// closures and therefore code-level only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    /// `f = 0`: plain conditional expectation.
    Zero,
    /// `f = -rate * y`.
    LinearDiscount,
}

/// `[driver]`: the backward-equation driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverSection {
    pub kind: DriverKind,
    /// Discount rate; only read for `linear_discount`.
    pub rate: f64,
}

impl Default for DriverSection {
    fn default() -> Self {
        DriverSection {
            kind: DriverKind::Zero,
            rate: 0.0,
        }
    }
}

/// `[solver]`: numerical options of the backward solver that are not part of
/// the basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    /// Condition-number limit for the per-step normal equations.
    pub condition_limit: f64,
    /// Driver evaluations per step.
    pub picard_sweeps: u32,
}

impl Default for SolverSection {
    fn default() -> Self {
        let opts = SolverOptions::default();
        SolverSection {
            condition_limit: opts.condition_limit,
            picard_sweeps: opts.picard_sweeps,
        }
    }
}

/// `[bump]`: finite-difference bump sizes and scheme. Omitted sizes resolve
/// to the standard state-scaled defaults `eps_x = 1e-3 * max(1, |x0|)` and
/// `eps_omega = 1e-2 * v0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BumpSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_omega: Option<f64>,
    pub scheme: BumpScheme,
}

/// `[monte_carlo]`: path counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSection {
    /// Paths of unconditional ensembles (simulate, price, solve-bsde,
    /// martingale check).
    pub outer_paths: usize,
    /// Paths of each per-state loading regression in the identity checks.
    pub inner_paths: usize,
    /// Paths of each bump-revaluation derivative estimate.
    pub deriv_paths: usize,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        MonteCarloSection {
            outer_paths: 100_000,
            inner_paths: 100_000,
            deriv_paths: 100_000,
        }
    }
}

/// `[verify]`: identity-check geometry and pass thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Number of outer states sampled at the test node.
    pub n_states: usize,
    /// Test node as a fraction of the horizon; the node index is
    /// `round(t_fraction * n_steps)` and must land strictly before the
    /// horizon.
    pub t_fraction: f64,
    /// A state agrees when `|z| <= z_max`.
    pub z_max: f64,
    /// Minimum fraction of agreeing states.
    pub min_fraction: f64,
    /// Admissible band for the cross-state regression slope.
    pub slope_min: f64,
    pub slope_max: f64,
    /// Minimum cross-state R^2.
    pub min_r2: f64,
    /// Martingale-residual flagging threshold.
    pub martingale_threshold: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        let th = IdentityThresholds::default();
        VerifySection {
            n_states: 20,
            t_fraction: 0.5,
            z_max: th.z_max,
            min_fraction: th.min_fraction,
            slope_min: th.slope_min,
            slope_max: th.slope_max,
            min_r2: th.min_r2,
            martingale_threshold: RESIDUAL_THRESHOLD,
        }
    }
}

/// `[output]`: where the CLI writes its files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory, created if missing.
    pub directory: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: "out".into(),
        }
    }
}

/// The complete experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every consumer derives its own stream from it.
    pub seed: u64,
    /// Worker thread count; omitted means all available cores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub model: ModelSection,
    pub kernel: KernelSection,
    pub grid: GridSection,
    pub payoff: PayoffSection,
    pub driver: DriverSection,
    pub basis: BasisSpec,
    pub solver: SolverSection,
    pub bump: BumpSection,
    pub monte_carlo: MonteCarloSection,
    pub verify: VerifySection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: DEFAULT_SEED,
            workers: None,
            model: ModelSection::default(),
            kernel: KernelSection::default(),
            grid: GridSection::default(),
            payoff: PayoffSection::default(),
            driver: DriverSection::default(),
            basis: BasisSpec::default(),
            solver: SolverSection::default(),
            bump: BumpSection::default(),
            monte_carlo: MonteCarloSection::default(),
            verify: VerifySection::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse from TOML text and validate every section.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Load from a file; the error names the path on any failure.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| {
            // Re-wrap the inner detail only, not its Display prefix, so the
            // final message carries a single "config error:".
            let detail = match e {
                Error::Config(detail) => detail,
                other => other.to_string(),
            };
            Error::Config(format!("in config file {}: {detail}", path.display()))
        })
    }

    /// Serialize back to TOML (for provenance echoes).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Run every builder once so all invariants are checked up front.
    pub fn validate(&self) -> Result<()> {
        let grid = self.time_grid()?;
        self.model_params()?;
        self.initial_curve(&grid)?;
        self.payoff()?;
        let max_dt = (0..grid.n_steps())
            .map(|k| grid.dt(k))
            .try_fold(0.0_f64, |acc, dt| dt.map(|d| acc.max(d)))?;
        self.driver()?.validate(max_dt).map_err(|e| config_err("driver", e))?;
        self.solver_options()?;
        self.bump_spec()?;
        self.monte_carlo_checked()?;
        self.t_index(&grid)?;
        self.thresholds()?;
        if self.verify.n_states == 0 {
            return Err(config_err("verify", "n_states must be at least 1"));
        }
        if !(self.verify.martingale_threshold > 0.0 && self.verify.martingale_threshold.is_finite())
        {
            return Err(config_err(
                "verify",
                format!(
                    "martingale_threshold must be positive and finite, got {}",
                    self.verify.martingale_threshold
                ),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1 when given".into()));
        }
        if self.output.directory.is_empty() {
            return Err(config_err("output", "directory must not be empty"));
        }
        Ok(())
    }

    /// Effective worker thread count.
    pub fn effective_workers(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        })
    }

    /// Build the kernel.
    pub fn kernel(&self) -> Result<Kernel> {
        let k = &self.kernel;
        match k.kind {
            KernelKind::RiemannLiouville => Kernel::riemann_liouville(k.hurst, k.scale),
            KernelKind::Constant => Kernel::constant(k.scale),
            KernelKind::Zero => Ok(Kernel::zero()),
        }
        .map_err(|e| config_err("kernel", e))
    }

    /// Build the model parameters.
    pub fn model_params(&self) -> Result<ModelParams> {
        let m = &self.model;
        ModelParams::new(m.rho, m.x0, m.v0, self.kernel()?).map_err(|e| config_err("model", e))
    }

    /// Build the time grid.
    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.grid.horizon, self.grid.n_steps).map_err(|e| config_err("grid", e))
    }

    /// The tabulated initial curve, when one is configured. `None` means
    /// flat at `v0`.
    pub fn initial_curve(&self, grid: &TimeGrid) -> Result<Option<ForwardCurve>> {
        let Some(values) = &self.model.initial_curve else {
            return Ok(None);
        };
        let want = grid.n_steps() + 1;
        if values.len() != want {
            return Err(config_err(
                "model",
                format!(
                    "initial_curve has {} values but the grid has {want} nodes",
                    values.len()
                ),
            ));
        }
        ForwardCurve::new(0, values.clone())
            .map(Some)
            .map_err(|e| config_err("model", e))
    }

    /// Build the payoff.
    pub fn payoff(&self) -> Result<Payoff> {
        let p = &self.payoff;
        let payoff = match p.kind {
            PayoffKind::Call => Payoff::Call { strike: p.strike },
            PayoffKind::Put => Payoff::Put { strike: p.strike },
            PayoffKind::Digital => Payoff::Digital { strike: p.strike },
            PayoffKind::Identity => Payoff::Identity,
        };
        payoff.validate().map_err(|e| config_err("payoff", e))?;
        Ok(payoff)
    }

    /// Build the driver.
    pub fn driver(&self) -> Result<Driver> {
        Ok(match self.driver.kind {
            DriverKind::Zero => Driver::Zero,
            DriverKind::LinearDiscount => Driver::LinearDiscount {
                rate: self.driver.rate,
            },
        })
    }

    /// Build the backward-solver options.
    pub fn solver_options(&self) -> Result<SolverOptions> {
        self.basis.validate().map_err(|e| config_err("basis", e))?;
        if !(self.solver.condition_limit > 0.0 && self.solver.condition_limit.is_finite()) {
            return Err(config_err(
                "solver",
                format!(
                    "condition_limit must be positive and finite, got {}",
                    self.solver.condition_limit
                ),
            ));
        }
        if self.solver.picard_sweeps == 0 {
            return Err(config_err("solver", "picard_sweeps must be at least 1"));
        }
        Ok(SolverOptions {
            basis: self.basis,
            condition_limit: self.solver.condition_limit,
            picard_sweeps: self.solver.picard_sweeps,
        })
    }

    /// Build the bump spec, resolving omitted sizes to the standard
    /// state-scaled defaults.
    pub fn bump_spec(&self) -> Result<BumpSpec> {
        let standard = BumpSpec::standard(self.model.x0, self.model.v0);
        let spec = BumpSpec {
            eps_x: self.bump.eps_x.unwrap_or(standard.eps_x),
            eps_omega: self.bump.eps_omega.unwrap_or(standard.eps_omega),
            scheme: self.bump.scheme,
        };
        for (name, eps) in [("eps_x", spec.eps_x), ("eps_omega", spec.eps_omega)] {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(config_err(
                    "bump",
                    format!("{name} must be positive and finite, got {eps}"),
                ));
            }
        }
        Ok(spec)
    }

    fn monte_carlo_checked(&self) -> Result<MonteCarloSection> {
        let mc = self.monte_carlo;
        if mc.outer_paths == 0 || mc.inner_paths < 2 || mc.deriv_paths == 0 {
            return Err(config_err(
                "monte_carlo",
                format!(
                    "need outer_paths >= 1, inner_paths >= 2, deriv_paths >= 1, \
                     got {} / {} / {}",
                    mc.outer_paths, mc.inner_paths, mc.deriv_paths
                ),
            ));
        }
        Ok(mc)
    }

    /// The grid node at which identities are tested:
    /// `round(t_fraction * n_steps)`, required to land strictly before the
    /// horizon.
    pub fn t_index(&self, grid: &TimeGrid) -> Result<usize> {
        let f = self.verify.t_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(config_err(
                "verify",
                format!("t_fraction must lie in [0, 1], got {f}"),
            ));
        }
        let index = (f * grid.n_steps() as f64).round() as usize;
        if index >= grid.n_steps() {
            return Err(config_err(
                "verify",
                format!(
                    "t_fraction {f} rounds to node {index}, which leaves no step before the \
                     horizon (grid has {} steps)",
                    grid.n_steps()
                ),
            ));
        }
        Ok(index)
    }

    /// Identity pass thresholds.
    pub fn thresholds(&self) -> Result<IdentityThresholds> {
        let v = &self.verify;
        let all = [
            ("z_max", v.z_max),
            ("min_fraction", v.min_fraction),
            ("slope_min", v.slope_min),
            ("slope_max", v.slope_max),
            ("min_r2", v.min_r2),
        ];
        for (name, value) in all {
            if !value.is_finite() {
                return Err(config_err("verify", format!("{name} must be finite, got {value}")));
            }
        }
        if v.z_max <= 0.0 {
            return Err(config_err("verify", "z_max must be positive"));
        }
        if !(0.0..=1.0).contains(&v.min_fraction) {
            return Err(config_err("verify", "min_fraction must lie in [0, 1]"));
        }
        if v.slope_min > v.slope_max {
            return Err(config_err("verify", "slope_min must not exceed slope_max"));
        }
        Ok(IdentityThresholds {
            z_max: v.z_max,
            min_fraction: v.min_fraction,
            slope_min: v.slope_min,
            slope_max: v.slope_max,
            min_r2: v.min_r2,
        })
    }

    /// Build the full setup of an identity verification run.
    pub fn identity_setup(&self, corruption: Corruption) -> Result<IdentitySetup> {
        let grid = self.time_grid()?;
        let mc = self.monte_carlo_checked()?;
        let setup = IdentitySetup {
            params: self.model_params()?,
            payoff: self.payoff()?,
            driver: self.driver()?,
            t_index: self.t_index(&grid)?,
            n_states: self.verify.n_states,
            inner_paths: mc.inner_paths,
            deriv_paths: mc.deriv_paths,
            bump: self.bump_spec()?,
            initial_curve: self.initial_curve(&grid)?,
            thresholds: self.thresholds()?,
            seed: self.seed,
            corruption,
            grid,
        };
        Ok(setup)
    }

    /// Build the full setup of a martingale verification run.
    pub fn martingale_setup(&self, scale_integrands: f64) -> Result<MartingaleSetup> {
        let grid = self.time_grid()?;
        let mc = self.monte_carlo_checked()?;
        let setup = MartingaleSetup {
            params: self.model_params()?,
            payoff: self.payoff()?,
            driver: self.driver()?,
            options: self.solver_options()?,
            initial_curve: self.initial_curve(&grid)?,
            n_paths: mc.outer_paths,
            seed: self.seed,
            threshold: self.verify.martingale_threshold,
            scale_integrands,
            grid,
        };
        Ok(setup)
    }
}
