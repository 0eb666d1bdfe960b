//! Cross-verification of the integrand identities.
//!
//! The backward equation's integrands admit two independent estimators:
//!
//! * a **probabilistic** one — the loading of the (discounted) terminal
//!   payoff on a single driver increment, extracted by regressing the payoff
//!   on *all* post-anchor increments (the coefficient on one increment is its
//!   martingale-representation loading; the other regressors only soak up
//!   variance, leaving the coefficient unbiased because all increments are
//!   independent);
//! * a **pathwise** one — common-random-number bump derivatives of the value
//!   in the price and curve arguments ([`crate::pathderiv`]).
//!
//! The identities checked here:
//!
//! * `psi`: the variance-driver integrand minus `rho * chi(V_t) * dx_u`
//!   equals the curve derivative of the value in the direction by which the
//!   variance increment moves nodes of the curve
//!   ([`BumpDirection::IncrementLoading`]).
//! * `z1`: the price-driver integrand equals `rho_bar * chi(V_t) * dx_u`.
//!
//! Both hold *exactly* in this discrete model (Gaussian integration by
//! parts: `E[G dW] / dt = E[dG/d(dW)]`, and the chain rule splits the right
//! side into exactly the price and curve channels), so disagreement beyond
//! Monte Carlo error indicates an implementation fault. Verification runs
//! the comparison over a batch of states sampled from the model's own law at
//! an interior time and reports per-state z-scores plus a cross-state
//! regression of one side on the other.

use crate::bsde::{solve_bsde, BsdeSolution, Driver, MartingaleReport, SolverOptions};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::pathderiv::{dx_u, gateaux_omega_u, BumpDirection, BumpSpec};
use crate::paths::{
    conditional_forward, theta_curve, unconditional_ensemble, ForwardCurve, ModelParams,
    PathEnsemble,
};
use crate::rng::{derive_seed, tag};
use crate::stats::{mean, simple_ols};
use crate::valuation::Payoff;
use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// When the cross-state variance of the reference side is below this factor
/// times its mean squared standard error, the side is statistically constant
/// and the slope/R^2 comparison is meaningless: the report degenerates to
/// the z-score criterion alone.
const DEGENERATE_VARIANCE_FACTOR: f64 = 4.0;

/// Minimum number of successfully evaluated states for a cross-state
/// regression to be attempted at all.
const MIN_STATES_FOR_REGRESSION: usize = 3;

/// Which identity a report refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityKind {
    /// Variance-driver integrand vs. curve derivative.
    Psi,
    /// Price-driver integrand vs. scaled price derivative.
    Z1,
}

/// Deliberate corruption switches for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Honest run.
    None,
    /// Flip the sign of `rho` in the subtraction term of the `psi`
    /// reconstruction (no effect on the `z1` check, which does not subtract).
    FlipRhoInSubtraction,
    /// Scale the right-hand side by a factor.
    ScaleRhs { factor: f64 },
}

/// Pass/fail thresholds of an identity report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityThresholds {
    /// A state agrees when `|z| <= z_max`.
    pub z_max: f64,
    /// Minimum fraction of agreeing states.
    pub min_fraction: f64,
    /// Admissible band for the cross-state regression slope.
    pub slope_min: f64,
    pub slope_max: f64,
    /// Minimum cross-state R^2.
    pub min_r2: f64,
}

impl Default for IdentityThresholds {
    fn default() -> Self {
        IdentityThresholds {
            z_max: 3.0,
            min_fraction: 0.9,
            slope_min: 0.9,
            slope_max: 1.1,
            min_r2: 0.9,
        }
    }
}

/// Everything an identity verification run needs.
#[derive(Debug, Clone)]
pub struct IdentitySetup {
    pub params: ModelParams,
    pub grid: TimeGrid,
    pub payoff: Payoff,
    pub driver: Driver,
    /// Node at which states are sampled and the identity is tested.
    pub t_index: usize,
    /// Number of outer states.
    pub n_states: usize,
    /// Paths of the per-state loading regression.
    pub inner_paths: usize,
    /// Paths of each per-state bump-derivative estimate.
    pub deriv_paths: usize,
    /// Bump sizes/scheme for the derivative estimates.
    pub bump: BumpSpec,
    /// Initial forward-variance curve of the outer-state sampler; `None`
    /// means the flat curve at `params.v0`.
    pub initial_curve: Option<ForwardCurve>,
    pub thresholds: IdentityThresholds,
    pub seed: u64,
    pub corruption: Corruption,
}

impl IdentitySetup {
    fn validate(&self) -> Result<()> {
        let n = self.grid.n_steps();
        if self.t_index >= n {
            return Err(Error::InvalidParameter(format!(
                "t_index {} leaves no step before the horizon (grid has {n} steps)",
                self.t_index
            )));
        }
        if self.n_states == 0 {
            return Err(Error::InvalidParameter("need at least one state".into()));
        }
        if self.inner_paths < 2 || self.deriv_paths == 0 {
            return Err(Error::InvalidParameter(
                "inner_paths must be >= 2 and deriv_paths >= 1".into(),
            ));
        }
        self.payoff.validate()?;
        Ok(())
    }
}

/// One state's comparison of the two estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateRecord {
    pub state_index: usize,
    /// Log-price at the anchor.
    pub x: f64,
    /// Variance at the anchor.
    pub v: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// `(lhs - rhs) / sqrt(lhs_se^2 + rhs_se^2)`.
    pub z: f64,
    /// Present when this state's estimators failed; such states carry no
    /// usable numbers and are excluded from the aggregate.
    pub error: Option<String>,
}

/// Cross-state summary statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IdentityAggregate {
    pub mean_abs_z: f64,
    /// Fraction of successful states with `|z| <= z_max`.
    pub fraction_within: f64,
    /// Cross-state regression of lhs on rhs; absent when degenerate.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    /// The reference side showed no resolvable cross-state variation, so
    /// only the z-score criterion applies.
    pub degenerate: bool,
}

/// Full identity-verification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    pub kind: IdentityKind,
    pub t_index: usize,
    pub n_states: usize,
    /// States whose estimators returned an error.
    pub n_failed: usize,
    pub corruption: Corruption,
    pub thresholds: IdentityThresholds,
    pub records: Vec<StateRecord>,
    pub aggregate: IdentityAggregate,
    pub pass: bool,
}

/// Per-path reconstruction of the curve-channel integrand from a solved
/// backward equation: `psi = z2 - rho * chi(V) * dx_u`, with the price
/// derivative either supplied externally or proxied through the fitted `z1`.
#[derive(Debug, Clone)]
pub struct PsiEstimates {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Source of the per-path price-derivative estimates used by
/// [`reconstruct_psi`].
pub enum DxSource<'a> {
    /// `dx_u = z1 / (rho_bar * chi(V))`: the price-channel identity read
    /// backwards. Requires `|rho| < 1`; paths whose `chi(V)` falls below
    /// `floor` get a zero derivative (the channel carries no noise there).
    FromZ1 { floor: f64 },
    /// Externally estimated values and standard errors, one per path.
    Supplied {
        values: &'a [f64],
        std_errors: &'a [f64],
    },
}

/// Reconstruct per-path `psi` estimates at one step of a solved backward
/// equation. Standard errors combine the fitted-integrand prediction error
/// with the supplied price-derivative error in quadrature.
pub fn reconstruct_psi(
    params: &ModelParams,
    solution: &BsdeSolution,
    ensemble: &PathEnsemble,
    t_index: usize,
    dx: DxSource<'_>,
) -> Result<PsiEstimates> {
    let n = solution.n_paths();
    if ensemble.n_paths() != n {
        return Err(Error::InvalidParameter(
            "solution and ensemble path counts do not match".into(),
        ));
    }
    let local = ensemble.local_index(t_index)?;
    if local >= solution.n_local_steps() {
        return Err(Error::Index(format!(
            "node {t_index} has no integrand (terminal or beyond)"
        )));
    }
    if let DxSource::Supplied { values, std_errors } = &dx {
        if values.len() != n || std_errors.len() != n {
            return Err(Error::InvalidParameter(
                "supplied derivative arrays must have one entry per path".into(),
            ));
        }
    }
    if let DxSource::FromZ1 { .. } = &dx {
        if params.rho_bar == 0.0 {
            return Err(Error::InvalidParameter(
                "z1 proxy needs |rho| < 1 (the price channel vanishes at full correlation)"
                    .into(),
            ));
        }
    }
    let mut values = Vec::with_capacity(n);
    let mut std_errors = Vec::with_capacity(n);
    for p in 0..n {
        let chi = params.chi.eval(ensemble.v()[[p, local]]);
        let weight = params.rho * chi;
        let (dx_p, dx_se_p) = match &dx {
            DxSource::FromZ1 { floor } => {
                let denom = params.rho_bar * chi;
                if denom <= *floor {
                    (0.0, 0.0)
                } else {
                    (
                        solution.z1()[[p, local]] / denom,
                        solution.z1_se()[[p, local]] / denom,
                    )
                }
            }
            DxSource::Supplied { values, std_errors } => (values[p], std_errors[p]),
        };
        values.push(solution.z2()[[p, local]] - weight * dx_p);
        std_errors.push(
            (solution.z2_se()[[p, local]].powi(2) + (weight * dx_se_p).powi(2)).sqrt(),
        );
    }
    Ok(PsiEstimates { values, std_errors })
}

/// An estimate with a standard error.
#[derive(Debug, Clone, Copy)]
struct Estimate {
    value: f64,
    se: f64,
}

/// Step-0 loadings of the discounted terminal payoff on the two driver
/// increments of a conditional ensemble.
struct Loadings {
    on_db: Estimate,
    on_dw: Estimate,
}

/// Regress the discounted terminal payoff on an intercept and every stored
/// increment (`dW`, `dB`, refinement) of the ensemble. The coefficients on
/// the first-step `dW`/`dB` are the variance- and price-driver loadings at
/// the anchor; the remaining regressors are independent of them and serve
/// purely as control variates. Standard errors are heteroskedasticity-robust
/// (sandwich) since the payoff's conditional variance depends on the path.
fn increment_loadings(ens: &PathEnsemble, payoff: Payoff, discount: f64) -> Result<Loadings> {
    let n = ens.n_paths();
    let m = ens.n_local_steps();
    if m == 0 {
        return Err(Error::InvalidParameter(
            "loading regression needs at least one step".into(),
        ));
    }
    let p = 1 + 3 * m;
    if n <= p + 1 {
        return Err(Error::InvalidParameter(format!(
            "loading regression needs more than {} paths, got {n}",
            p + 1
        )));
    }
    let col_dw0 = 1;
    let col_db0 = 1 + m;

    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0_f64; p];
    let fill_row = |row: &mut [f64], path: usize| {
        row[0] = 1.0;
        for k in 0..m {
            row[1 + k] = ens.dw()[[path, k]];
            row[1 + m + k] = ens.db()[[path, k]];
            row[1 + 2 * m + k] = ens.xi()[[path, k]];
        }
    };
    let mut y = vec![0.0_f64; n];
    for path in 0..n {
        fill_row(&mut row, path);
        y[path] = discount * payoff.eval_log(ens.x()[[path, m]]);
        for i in 0..p {
            let xi_ = row[i];
            xty[i] += xi_ * y[path];
            for j in i..p {
                xtx[(i, j)] += xi_ * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
    }

    let chol = Cholesky::new(xtx.clone()).ok_or_else(|| Error::FactorizationFailure(
        "loading regression normal equations are singular".into(),
    ))?;
    let beta = chol.solve(&xty);

    // Second pass: residuals and the sandwich meat restricted to the two
    // coefficients of interest (u_j' (sum r^2 x x') u_j with u_j = S^-1 e_j).
    let mut u_dw = DVector::<f64>::zeros(p);
    u_dw[col_dw0] = 1.0;
    let u_dw = chol.solve(&u_dw);
    let mut u_db = DVector::<f64>::zeros(p);
    u_db[col_db0] = 1.0;
    let u_db = chol.solve(&u_db);
    let mut var_dw = 0.0;
    let mut var_db = 0.0;
    for path in 0..n {
        fill_row(&mut row, path);
        let mut fitted = 0.0;
        let mut proj_dw = 0.0;
        let mut proj_db = 0.0;
        for i in 0..p {
            fitted += row[i] * beta[i];
            proj_dw += row[i] * u_dw[i];
            proj_db += row[i] * u_db[i];
        }
        let r2 = (y[path] - fitted).powi(2);
        var_dw += r2 * proj_dw * proj_dw;
        var_db += r2 * proj_db * proj_db;
    }

    Ok(Loadings {
        on_db: Estimate {
            value: beta[col_db0],
            se: var_db.sqrt(),
        },
        on_dw: Estimate {
            value: beta[col_dw0],
            se: var_dw.sqrt(),
        },
    })
}

/// Discount factors a linear driver applies to the value at the anchor node
/// and at the next node. Nonlinear drivers have no closed discount and are
/// rejected: the nested estimators would not be conditional expectations.
fn linear_discounts(driver: &Driver, grid: &TimeGrid, t_index: usize) -> Result<(f64, f64)> {
    let horizon = grid.horizon();
    match driver {
        Driver::Zero => Ok((1.0, 1.0)),
        Driver::LinearDiscount { rate } => {
            let at_t = (-rate * (horizon - grid.node(t_index)?)).exp();
            let at_next = (-rate * (horizon - grid.node(t_index + 1)?)).exp();
            Ok((at_t, at_next))
        }
        Driver::Custom { name, .. } => Err(Error::InvalidParameter(format!(
            "identity verification requires the zero or linear-discount driver, got custom driver {name:?}"
        ))),
    }
}

/// A sampled outer state: the forward curve and log-price of one path at the
/// anchor node.
struct OuterState {
    curve: ForwardCurve,
    x: f64,
    v: f64,
}

fn sample_outer_states(setup: &IdentitySetup) -> Result<Vec<OuterState>> {
    let outer_seed = derive_seed(setup.seed, tag::IDENTITY_OUTER, 0);
    let ens = unconditional_ensemble(
        &setup.params,
        &setup.grid,
        setup.initial_curve.as_ref(),
        setup.n_states,
        outer_seed,
    )?;
    (0..setup.n_states)
        .map(|p| {
            let curve = theta_curve(&ens, p, setup.t_index)?;
            Ok(OuterState {
                x: ens.x()[[p, setup.t_index]],
                v: ens.v()[[p, setup.t_index]],
                curve,
            })
        })
        .collect()
}

fn evaluate_state(
    setup: &IdentitySetup,
    kind: IdentityKind,
    state_index: usize,
    state: &OuterState,
) -> Result<(f64, f64, f64, f64)> {
    let params = &setup.params;
    let (disc_t, disc_next) = linear_discounts(&setup.driver, &setup.grid, setup.t_index)?;
    let chi_t = params.chi.eval(state.v);
    let idx = state_index as u64;

    let lhs_seed = derive_seed(setup.seed, tag::IDENTITY_LHS, idx);
    let inner = conditional_forward(
        params,
        &setup.grid,
        setup.t_index,
        &state.curve,
        state.x,
        setup.inner_paths,
        lhs_seed,
    )?;
    let loadings = increment_loadings(&inner, setup.payoff, disc_next)?;

    let (lhs, lhs_se, rhs, rhs_se) = match kind {
        IdentityKind::Psi => {
            let dx_seed = derive_seed(setup.seed, tag::IDENTITY_LHS_DX, idx);
            let dx = dx_u(
                params,
                &setup.grid,
                setup.t_index,
                &state.curve,
                state.x,
                setup.payoff,
                &setup.bump,
                setup.deriv_paths,
                dx_seed,
            )?;
            let rho_eff = match setup.corruption {
                Corruption::FlipRhoInSubtraction => -params.rho,
                _ => params.rho,
            };
            let weight = rho_eff * chi_t;
            let lhs = loadings.on_dw.value - weight * disc_t * dx.value;
            let lhs_se =
                (loadings.on_dw.se.powi(2) + (weight * disc_t * dx.std_error).powi(2)).sqrt();

            let rhs_seed = derive_seed(setup.seed, tag::IDENTITY_RHS, idx);
            let gateaux = gateaux_omega_u(
                params,
                &setup.grid,
                setup.t_index,
                &state.curve,
                state.x,
                setup.payoff,
                &BumpDirection::IncrementLoading,
                &setup.bump,
                setup.deriv_paths,
                rhs_seed,
            )?;
            (lhs, lhs_se, disc_t * gateaux.value, disc_t * gateaux.std_error)
        }
        IdentityKind::Z1 => {
            let dx_seed = derive_seed(setup.seed, tag::IDENTITY_RHS_DX, idx);
            let dx = dx_u(
                params,
                &setup.grid,
                setup.t_index,
                &state.curve,
                state.x,
                setup.payoff,
                &setup.bump,
                setup.deriv_paths,
                dx_seed,
            )?;
            let weight = params.rho_bar * chi_t * disc_t;
            (
                loadings.on_db.value,
                loadings.on_db.se,
                weight * dx.value,
                weight * dx.std_error,
            )
        }
    };

    let (rhs, rhs_se) = match setup.corruption {
        Corruption::ScaleRhs { factor } => (factor * rhs, factor.abs() * rhs_se),
        _ => (rhs, rhs_se),
    };
    Ok((lhs, lhs_se, rhs, rhs_se))
}

fn z_score(lhs: f64, lhs_se: f64, rhs: f64, rhs_se: f64) -> f64 {
    let denom = (lhs_se * lhs_se + rhs_se * rhs_se).sqrt();
    let floor = 1e-15 * (1.0 + lhs.abs() + rhs.abs());
    (lhs - rhs) / denom.max(floor)
}

fn run_identity(setup: &IdentitySetup, kind: IdentityKind) -> Result<IdentityReport> {
    setup.validate()?;
    let states = sample_outer_states(setup)?;

    let records: Vec<StateRecord> = states
        .par_iter()
        .enumerate()
        .map(|(i, state)| match evaluate_state(setup, kind, i, state) {
            Ok((lhs, lhs_se, rhs, rhs_se)) => StateRecord {
                state_index: i,
                x: state.x,
                v: state.v,
                lhs,
                lhs_se,
                rhs,
                rhs_se,
                z: z_score(lhs, lhs_se, rhs, rhs_se),
                error: None,
            },
            Err(e) => StateRecord {
                state_index: i,
                x: state.x,
                v: state.v,
                lhs: f64::NAN,
                lhs_se: f64::NAN,
                rhs: f64::NAN,
                rhs_se: f64::NAN,
                z: f64::NAN,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let good: Vec<&StateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let n_failed = records.len() - good.len();
    let thresholds = setup.thresholds;

    let aggregate = if good.is_empty() {
        IdentityAggregate {
            mean_abs_z: f64::NAN,
            fraction_within: 0.0,
            slope: None,
            intercept: None,
            r_squared: None,
            degenerate: true,
        }
    } else {
        let zs: Vec<f64> = good.iter().map(|r| r.z.abs()).collect();
        let fraction_within =
            good.iter().filter(|r| r.z.abs() <= thresholds.z_max).count() as f64
                / good.len() as f64;
        let rhs_values: Vec<f64> = good.iter().map(|r| r.rhs).collect();
        let lhs_values: Vec<f64> = good.iter().map(|r| r.lhs).collect();
        let rhs_mean = mean(&rhs_values);
        let rhs_var = rhs_values
            .iter()
            .map(|r| (r - rhs_mean).powi(2))
            .sum::<f64>()
            / (rhs_values.len().max(2) - 1) as f64;
        let mean_se2 = mean(
            &good
                .iter()
                .map(|r| r.rhs_se * r.rhs_se)
                .collect::<Vec<_>>(),
        );
        let degenerate = good.len() < MIN_STATES_FOR_REGRESSION
            || rhs_var <= DEGENERATE_VARIANCE_FACTOR * mean_se2;
        let fit = if degenerate {
            None
        } else {
            simple_ols(&rhs_values, &lhs_values)
        };
        IdentityAggregate {
            mean_abs_z: mean(&zs),
            fraction_within,
            slope: fit.map(|(s, _, _)| s),
            intercept: fit.map(|(_, i, _)| i),
            r_squared: fit.map(|(_, _, r2)| r2),
            degenerate: fit.is_none(),
        }
    };

    let fraction_ok = aggregate.fraction_within >= thresholds.min_fraction;
    let regression_ok = if aggregate.degenerate {
        true
    } else {
        match (aggregate.slope, aggregate.r_squared) {
            (Some(s), Some(r2)) => {
                s >= thresholds.slope_min && s <= thresholds.slope_max && r2 >= thresholds.min_r2
            }
            _ => false,
        }
    };
    let pass = n_failed == 0 && fraction_ok && regression_ok;

    Ok(IdentityReport {
        kind,
        t_index: setup.t_index,
        n_states: setup.n_states,
        n_failed,
        corruption: setup.corruption,
        thresholds,
        records,
        aggregate,
        pass,
    })
}

/// Verify the curve-channel identity: the variance-driver loading minus
/// `rho * chi(V_t) * dx_u` against the pathwise curve derivative in the
/// increment-loading direction.
pub fn verify_psi_identity(setup: &IdentitySetup) -> Result<IdentityReport> {
    run_identity(setup, IdentityKind::Psi)
}

/// Verify the price-channel identity: the price-driver loading against
/// `rho_bar * chi(V_t) * dx_u`.
pub fn verify_z1_identity(setup: &IdentitySetup) -> Result<IdentityReport> {
    run_identity(setup, IdentityKind::Z1)
}

/// Setup of a martingale-residual verification run.
#[derive(Debug, Clone)]
pub struct MartingaleSetup {
    pub params: ModelParams,
    pub grid: TimeGrid,
    pub payoff: Payoff,
    pub driver: Driver,
    pub options: SolverOptions,
    /// Initial forward-variance curve (`None` = flat at `params.v0`).
    pub initial_curve: Option<ForwardCurve>,
    pub n_paths: usize,
    pub seed: u64,
    /// Residual flagging threshold (z/t statistic).
    pub threshold: f64,
    /// Factor applied to both integrands before the residual check;
    /// `1.0` is the honest run, anything else a negative control.
    pub scale_integrands: f64,
}

/// Outcome of a martingale verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleVerification {
    pub n_paths: usize,
    pub scale_integrands: f64,
    pub report: MartingaleReport,
    /// True when no step is flagged.
    pub pass: bool,
}

/// Solve the backward equation on a fresh unconditional ensemble and check
/// the discrete martingale property of the (optionally corrupted) solution.
pub fn verify_martingale(setup: &MartingaleSetup) -> Result<MartingaleVerification> {
    let seed = derive_seed(setup.seed, tag::MARTINGALE, 0);
    let ens = unconditional_ensemble(
        &setup.params,
        &setup.grid,
        setup.initial_curve.as_ref(),
        setup.n_paths,
        seed,
    )?;
    let solution = solve_bsde(&ens, setup.payoff, &setup.driver, &setup.options)?;
    let checked = if setup.scale_integrands == 1.0 {
        solution
    } else {
        solution.with_scaled_integrands(setup.scale_integrands)
    };
    let report = crate::bsde::martingale_residual(&checked, &ens, setup.threshold)?;
    let pass = report.is_clean();
    Ok(MartingaleVerification {
        n_paths: setup.n_paths,
        scale_integrands: setup.scale_integrands,
        report,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::BasisSpec;
    use crate::kernel::Kernel;
    use crate::paths::simulate_joint;
    use crate::stats::correlation;

    fn zero_kernel_params() -> ModelParams {
        ModelParams::new(-0.3, 100.0_f64.ln(), 0.04, Kernel::zero()).unwrap()
    }

    fn rough_params() -> ModelParams {
        let kernel = Kernel::riemann_liouville(0.3, 0.012).unwrap();
        ModelParams::new(-0.7, 100.0_f64.ln(), 0.04, kernel).unwrap()
    }

    fn small_setup(params: ModelParams, grid: TimeGrid) -> IdentitySetup {
        let bump = BumpSpec::standard(params.x0, params.v0);
        IdentitySetup {
            params,
            grid,
            payoff: Payoff::Call { strike: 100.0 },
            driver: Driver::Zero,
            t_index: 4,
            n_states: 6,
            inner_paths: 20_000,
            deriv_paths: 4_000,
            bump,
            initial_curve: None,
            thresholds: IdentityThresholds::default(),
            seed: 424_242,
            corruption: Corruption::None,
        }
    }

    #[test]
    fn reconstruct_psi_is_z2_when_rho_is_zero() {
        let params = ModelParams::new(0.0, 100.0_f64.ln(), 0.04, Kernel::zero()).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 4_000, 7).unwrap();
        let sol = solve_bsde(
            &ens,
            Payoff::Call { strike: 100.0 },
            &Driver::Zero,
            &SolverOptions::default(),
        )
        .unwrap();
        let psi = reconstruct_psi(&params, &sol, &ens, 4, DxSource::FromZ1 { floor: 1e-12 })
            .unwrap();
        for p in 0..ens.n_paths() {
            assert_eq!(psi.values[p], sol.z2()[[p, 4]]);
            assert_eq!(psi.std_errors[p], sol.z2_se()[[p, 4]]);
        }
    }

    #[test]
    fn reconstruct_psi_vanishes_for_zero_kernel() {
        // No curve channel: z2 = rho chi dx_u path by path, so the
        // reconstruction is zero within its propagated error.
        let params = zero_kernel_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 30_000, 11).unwrap();
        let sol = solve_bsde(
            &ens,
            Payoff::Call { strike: 100.0 },
            &Driver::Zero,
            &SolverOptions::default(),
        )
        .unwrap();
        let psi = reconstruct_psi(&params, &sol, &ens, 4, DxSource::FromZ1 { floor: 1e-12 })
            .unwrap();
        let mut checked = 0;
        for p in (0..ens.n_paths()).step_by(577) {
            let tol = 3.0 * psi.std_errors[p] + 1e-2;
            assert!(
                psi.values[p].abs() <= tol,
                "path {p}: psi {} exceeds {tol}",
                psi.values[p]
            );
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn reconstruct_psi_rejects_proxy_at_full_correlation() {
        let params = ModelParams::new(1.0, 100.0_f64.ln(), 0.04, Kernel::zero()).unwrap();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let ens = simulate_joint(&params, &grid, 600, 3).unwrap();
        let sol = solve_bsde(
            &ens,
            Payoff::Call { strike: 100.0 },
            &Driver::Zero,
            &SolverOptions {
                basis: BasisSpec {
                    degree: 1,
                    include_intrinsic: false,
                    include_forward_variance: false,
                },
                ..SolverOptions::default()
            },
        )
        .unwrap();
        let err = reconstruct_psi(&params, &sol, &ens, 2, DxSource::FromZ1 { floor: 1e-12 })
            .unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn zero_kernel_psi_report_is_degenerate_pass() {
        // The increment-loading direction of the zero kernel is identically
        // zero, so the right side is exactly 0 with zero error; the left side
        // must agree within noise and the slope test must be skipped.
        let params = zero_kernel_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let report = verify_psi_identity(&small_setup(params, grid)).unwrap();
        assert_eq!(report.n_failed, 0);
        assert!(report.aggregate.degenerate, "zero kernel must degenerate");
        assert!(report.aggregate.slope.is_none());
        assert!(report.pass, "aggregate: {:?}", report.aggregate);
        for r in &report.records {
            assert_eq!(r.rhs, 0.0);
            assert_eq!(r.rhs_se, 0.0);
        }
    }

    #[test]
    fn z1_report_trivially_passes_at_full_correlation() {
        // rho = 1: the price channel is driven by dW alone, so both the dB
        // loading and rho_bar * chi * dx_u vanish.
        let params = ModelParams::new(1.0, 100.0_f64.ln(), 0.04, Kernel::zero()).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let report = verify_z1_identity(&small_setup(params, grid)).unwrap();
        assert_eq!(report.n_failed, 0);
        assert!(report.aggregate.degenerate);
        assert!(report.pass, "aggregate: {:?}", report.aggregate);
        for r in &report.records {
            assert_eq!(r.rhs, 0.0);
            assert!(r.lhs.abs() <= 3.5 * r.lhs_se, "lhs {} se {}", r.lhs, r.lhs_se);
        }
    }

    #[test]
    fn z1_report_passes_for_zero_kernel() {
        // Deterministic variance: dx_u is the discounted Black-Scholes delta
        // in log space, and the dB loading must match rho_bar chi times it
        // state by state, with a clean cross-state slope.
        let params = zero_kernel_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let report = verify_z1_identity(&small_setup(params, grid)).unwrap();
        assert_eq!(report.n_failed, 0);
        assert!(!report.aggregate.degenerate, "states must spread the rhs");
        assert!(report.pass, "aggregate: {:?}", report.aggregate);
    }

    #[test]
    fn psi_negative_control_fails() {
        // Flipping rho in the subtraction shifts the left side by
        // 2 rho chi dx_u, which dwarfs every standard error.
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let mut setup = small_setup(params, grid);
        setup.inner_paths = 8_000;
        setup.deriv_paths = 2_000;
        setup.corruption = Corruption::FlipRhoInSubtraction;
        let report = verify_psi_identity(&setup).unwrap();
        assert!(!report.pass, "corrupted run must fail: {:?}", report.aggregate);
        assert!(report.aggregate.fraction_within < 0.5);
    }

    #[test]
    fn rough_psi_report_passes_at_test_scale() {
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let mut setup = small_setup(params, grid);
        setup.n_states = 8;
        setup.inner_paths = 30_000;
        setup.deriv_paths = 6_000;
        let report = verify_psi_identity(&setup).unwrap();
        assert_eq!(report.n_failed, 0);
        assert!(
            report.aggregate.fraction_within >= 0.75,
            "aggregate: {:?} records: {:?}",
            report.aggregate,
            report
                .records
                .iter()
                .map(|r| (r.lhs, r.rhs, r.z))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn lhs_and_rhs_noise_is_decorrelated() {
        // Replicate one state's two estimators under shifting seed indices;
        // disjoint tags must leave their fluctuations uncorrelated (a CRN
        // coupling would show correlation near 1).
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let curve = ForwardCurve::flat(&grid, 0, params.v0).unwrap();
        let state = OuterState {
            curve,
            x: params.x0,
            v: params.v0,
        };
        let mut setup = small_setup(params, grid);
        setup.t_index = 0;
        setup.inner_paths = 2_000;
        setup.deriv_paths = 500;
        let mut lhs = Vec::new();
        let mut rhs = Vec::new();
        for rep in 0..40 {
            setup.seed = derive_seed(99, 0x5245_5045, rep);
            let (l, _, r, _) = evaluate_state(&setup, IdentityKind::Psi, 0, &state).unwrap();
            lhs.push(l);
            rhs.push(r);
        }
        let corr = correlation(&lhs, &rhs);
        assert!(corr.abs() < 0.6, "estimator noise correlated: {corr}");
    }

    #[test]
    fn martingale_wrapper_detects_scaled_integrands() {
        let params = zero_kernel_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let mut setup = MartingaleSetup {
            params,
            grid,
            payoff: Payoff::Call { strike: 100.0 },
            driver: Driver::Zero,
            options: SolverOptions::default(),
            initial_curve: None,
            n_paths: 20_000,
            seed: 5,
            threshold: crate::bsde::RESIDUAL_THRESHOLD,
            scale_integrands: 1.0,
        };
        let honest = verify_martingale(&setup).unwrap();
        assert!(honest.pass, "flagged: {:?}", honest.report.flagged_steps);
        setup.scale_integrands = 2.0;
        let corrupted = verify_martingale(&setup).unwrap();
        assert!(!corrupted.pass);
    }

    #[test]
    fn setup_validation_rejects_bad_indices() {
        let params = zero_kernel_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let mut setup = small_setup(params, grid);
        setup.t_index = 8;
        assert!(verify_psi_identity(&setup).is_err());
    }

    #[test]
    fn custom_driver_is_rejected() {
        let params = zero_kernel_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let mut setup = small_setup(params, grid);
        setup.driver = Driver::Custom {
            name: "toy".into(),
            lipschitz: 0.1,
            f: std::sync::Arc::new(|_| 0.0),
        };
        let report = verify_psi_identity(&setup).unwrap();
        assert_eq!(report.n_failed, setup.n_states);
        assert!(!report.pass);
    }
}
