//! Regression Monte Carlo solver for the backward equation attached to the
//! forward system.
//!
//! Working backwards from the terminal payoff, each step regresses the next
//! value on a polynomial state basis to get the continuation value, then
//! regresses the control-variated products `(Y_{k+1} - cont) dB_k / dt` and
//! `(Y_{k+1} - cont) dW_k / dt` on the same (already factorized) design to
//! get the two martingale integrands, and finally applies the driver
//! explicitly:
//!
//! ```text
//! Y_k = cont_k + f(t_k, S_k, Y, Z1, Z2) dt_k.
//! ```
//!
//! Subtracting the fitted continuation from the Z-regression targets leaves
//! their conditional means unchanged (the continuation is measurable at time
//! `t_k` and the increments are centered) while removing most of their
//! variance, which is what makes the fitted integrands usable pointwise.
//!
//! `Z1` is the loading on the price-only driver `B`, `Z2` the loading on the
//! variance driver `W`; both are per-unit-time integrands.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::PathEnsemble;
use crate::regression::DesignFactor;
use crate::stats::mean_and_se;
use crate::valuation::{Payoff, ValueEstimate};

/// Arguments handed to a driver evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs {
    /// Time of the node.
    pub t: f64,
    /// Price level `exp(x)`.
    pub s: f64,
    /// Current value estimate.
    pub y: f64,
    /// Integrand on the price-only driver.
    pub z1: f64,
    /// Integrand on the variance driver.
    pub z2: f64,
}

/// Driver (generator) of the backward equation.
#[derive(Clone)]
pub enum Driver {
    /// `f = 0`: conditional expectation of the payoff.
    Zero,
    /// `f = -rate * y`: discounting at a constant rate.
    LinearDiscount { rate: f64 },
    /// User-supplied driver with a declared Lipschitz constant in `(y, z1,
    /// z2)`; the constant gates the explicit scheme's stability check.
    Custom {
        name: String,
        lipschitz: f64,
        f: Arc<dyn Fn(DriverArgs) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Driver::Zero => write!(f, "Zero"),
            Driver::LinearDiscount { rate } => write!(f, "LinearDiscount {{ rate: {rate} }}"),
            Driver::Custom { name, lipschitz, .. } => {
                write!(f, "Custom {{ name: {name:?}, lipschitz: {lipschitz} }}")
            }
        }
    }
}

impl Driver {
    /// Evaluate the driver.
    pub fn eval(&self, args: DriverArgs) -> f64 {
        match self {
            Driver::Zero => 0.0,
            Driver::LinearDiscount { rate } => -rate * args.y,
            Driver::Custom { f, .. } => f(args),
        }
    }

    /// Effective Lipschitz constant in `(y, z1, z2)`.
    fn lipschitz(&self) -> f64 {
        match self {
            Driver::Zero => 0.0,
            Driver::LinearDiscount { rate } => rate.abs(),
            Driver::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    /// Check the declared constant and the explicit-scheme stability
    /// condition `L * max dt < 1`.
    pub fn validate(&self, max_dt: f64) -> Result<()> {
        let l = self.lipschitz();
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::LipschitzViolation(format!(
                "declared Lipschitz constant must be finite and nonnegative, got {l}"
            )));
        }
        if let Driver::LinearDiscount { rate } = self {
            if !rate.is_finite() {
                return Err(Error::LipschitzViolation(format!(
                    "discount rate must be finite, got {rate}"
                )));
            }
        }
        if l * max_dt >= 1.0 {
            return Err(Error::LipschitzViolation(format!(
                "explicit step unstable: Lipschitz constant {l} times max step {max_dt} is >= 1"
            )));
        }
        Ok(())
    }
}

/// Regression basis specification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSpec {
    /// Total degree of the polynomial part in `(x, v, int v)`.
    pub degree: u32,
    /// Include the payoff evaluated at the current log-price.
    pub include_intrinsic: bool,
    /// Include the remaining-horizon integral of the forward variance curve.
    pub include_forward_variance: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            degree: 2,
            include_intrinsic: true,
            include_forward_variance: false,
        }
    }
}

impl BasisSpec {
    /// Validate degrees we are prepared to stand behind.
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.degree) {
            return Err(Error::InvalidParameter(format!(
                "basis degree must be in 1..=4, got {}",
                self.degree
            )));
        }
        Ok(())
    }
}

/// Solver options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub basis: BasisSpec,
    /// Condition-number limit for the per-step normal equations.
    pub condition_limit: f64,
    /// Driver evaluations per step (1 = plain explicit step; more sweeps
    /// re-evaluate the driver at the updated value).
    pub picard_sweeps: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            basis: BasisSpec::default(),
            condition_limit: 1e12,
            picard_sweeps: 1,
        }
    }
}

/// Per-step regression diagnostics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Absolute node index of the step's left endpoint.
    pub node: usize,
    /// Condition number of the screened normal equations.
    pub condition: f64,
    /// Columns retained (including the intercept).
    pub rank: usize,
    /// In-sample R^2 of the continuation fit.
    pub r_squared_y: f64,
    /// In-sample R^2 of the two integrand fits (against their noisy
    /// targets; small values are expected and harmless).
    pub r_squared_z1: f64,
    pub r_squared_z2: f64,
}

/// Output of the backward solve.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// Grid the solve ran on.
    pub grid: TimeGrid,
    /// First covered node.
    pub anchor: usize,
    /// Value paths, `n_paths x (m + 1)` local nodes.
    y: Array2<f64>,
    /// Continuation values (before the driver term), `n_paths x m`.
    y_cont: Array2<f64>,
    /// Price-driver integrand, `n_paths x m`.
    z1: Array2<f64>,
    /// Variance-driver integrand, `n_paths x m`.
    z2: Array2<f64>,
    /// Prediction standard errors of the fitted quantities.
    y_cont_se: Array2<f64>,
    z1_se: Array2<f64>,
    z2_se: Array2<f64>,
    /// Per-step regression diagnostics, time-ascending.
    pub diagnostics: Vec<StepDiagnostics>,
    /// Value at the (deterministic) initial state of the ensemble.
    pub y0: ValueEstimate,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.y.nrows()
    }

    /// Local steps covered.
    pub fn n_local_steps(&self) -> usize {
        self.z1.ncols()
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn y_cont(&self) -> &Array2<f64> {
        &self.y_cont
    }

    pub fn z1(&self) -> &Array2<f64> {
        &self.z1
    }

    pub fn z2(&self) -> &Array2<f64> {
        &self.z2
    }

    pub fn y_cont_se(&self) -> &Array2<f64> {
        &self.y_cont_se
    }

    pub fn z1_se(&self) -> &Array2<f64> {
        &self.z1_se
    }

    pub fn z2_se(&self) -> &Array2<f64> {
        &self.z2_se
    }

    /// Condition numbers per step, time-ascending.
    pub fn condition_numbers(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.condition).collect()
    }

    /// A copy with both integrands scaled by `factor`, values untouched — a
    /// deliberately corrupted solution for negative-control diagnostics.
    pub fn with_scaled_integrands(&self, factor: f64) -> BsdeSolution {
        let mut out = self.clone();
        out.z1.mapv_inplace(|z| factor * z);
        out.z2.mapv_inplace(|z| factor * z);
        out
    }
}

/// Exponents of the monomials in `(x, v, i)` up to a total degree.
fn monomial_exponents(degree: u32) -> Vec<(u32, u32, u32)> {
    let mut out = Vec::new();
    for total in 1..=degree {
        for ex in (0..=total).rev() {
            for ev in (0..=(total - ex)).rev() {
                let ei = total - ex - ev;
                out.push((ex, ev, ei));
            }
        }
    }
    out
}

/// State features of every path at one local step.
pub(crate) struct StepFeatures {
    /// Raw design matrix, one row per path (no intercept).
    pub design: DMatrix<f64>,
}

/// Build the per-step feature matrix.
///
/// `running_integral` is the left-endpoint quadrature of V from the anchor
/// to the step's node; `forward_variance` (optional) is the
/// remaining-horizon integral of the conditional forward variance curve.
pub(crate) fn step_features(
    ensemble: &PathEnsemble,
    local_step: usize,
    basis: &BasisSpec,
    payoff: Payoff,
    running_integral: &[f64],
    forward_variance: Option<&[f64]>,
) -> StepFeatures {
    let n = ensemble.n_paths();
    let exps = monomial_exponents(basis.degree);
    let mut cols = exps.len();
    if basis.include_intrinsic {
        cols += 1;
    }
    if forward_variance.is_some() {
        cols += 1;
    }
    let mut design = DMatrix::zeros(n, cols);
    for p in 0..n {
        let x = ensemble.x()[[p, local_step]];
        let v = ensemble.v()[[p, local_step]];
        let integ = running_integral[p];
        let mut c = 0;
        for &(ex, ev, ei) in &exps {
            design[(p, c)] = x.powi(ex as i32) * v.powi(ev as i32) * integ.powi(ei as i32);
            c += 1;
        }
        if basis.include_intrinsic {
            design[(p, c)] = payoff.eval_log(x);
            c += 1;
        }
        if let Some(fv) = forward_variance {
            design[(p, c)] = fv[p];
        }
    }
    StepFeatures { design }
}

/// Remaining-horizon integral of the forward variance curve for every path
/// at every step: `fv[p][k] = sum_{j=k}^{m-1} Theta^k_j dt_j` where
/// `Theta^k_j` is the conditional forward curve at step `k`. Built forward
/// with an incremental accumulation of the ensemble's own noise-model
/// weights (the same weights [`crate::paths::theta_curve`] uses), `O(m^2)`
/// per path.
fn forward_variance_table(ensemble: &PathEnsemble) -> Result<Array2<f64>> {
    let m = ensemble.n_local_steps();
    let n = ensemble.n_paths();
    let grid = &ensemble.grid;
    let anchor = ensemble.anchor;
    let model = ensemble.noise_model();
    let dts: Vec<f64> = (0..m)
        .map(|k| grid.dt(anchor + k))
        .collect::<Result<_>>()?;
    let base: Vec<f64> = (0..=m)
        .map(|j| ensemble.base_curve.value_at(anchor + j))
        .collect::<Result<_>>()?;

    let mut fv = Array2::zeros((n, m));
    for p in 0..n {
        // accum[j] = sum_{l < k} (Abar[j,l] dW_l + M[j,l] xi_l), maintained
        // over k.
        let mut accum = vec![0.0; m + 1];
        for k in 0..m {
            if k > 0 {
                let w = ensemble.dw()[[p, k - 1]];
                let r = ensemble.xi()[[p, k - 1]];
                for j in k..=m {
                    accum[j] += model.loading_at(anchor + j, anchor + k - 1) * w;
                    accum[j] += model.refine_at(anchor + j, anchor + k - 1) * r;
                }
            }
            let mut total = 0.0;
            for j in k..m {
                total += (base[j] + accum[j]) * dts[j];
            }
            fv[[p, k]] = total;
        }
    }
    Ok(fv)
}

/// Solve the backward equation on a simulated ensemble.
pub fn solve_bsde(
    ensemble: &PathEnsemble,
    payoff: Payoff,
    driver: &Driver,
    options: &SolverOptions,
) -> Result<BsdeSolution> {
    payoff.validate()?;
    options.basis.validate()?;
    let m = ensemble.n_local_steps();
    let n = ensemble.n_paths();
    let grid = &ensemble.grid;
    let anchor = ensemble.anchor;
    let max_dt = (0..m)
        .map(|k| grid.dt(anchor + k))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0_f64, f64::max);
    driver.validate(max_dt)?;
    if options.picard_sweeps == 0 {
        return Err(Error::InvalidParameter(
            "picard_sweeps must be at least 1".into(),
        ));
    }

    let mut y = Array2::zeros((n, m + 1));
    for p in 0..n {
        y[[p, m]] = payoff.eval_log(ensemble.x()[[p, m]]);
    }

    let mut y_cont = Array2::zeros((n, m));
    let mut z1 = Array2::zeros((n, m));
    let mut z2 = Array2::zeros((n, m));
    let mut y_cont_se = Array2::zeros((n, m));
    let mut z1_se = Array2::zeros((n, m));
    let mut z2_se = Array2::zeros((n, m));
    let mut diagnostics = vec![
        StepDiagnostics {
            node: 0,
            condition: 0.0,
            rank: 0,
            r_squared_y: 0.0,
            r_squared_z1: 0.0,
            r_squared_z2: 0.0,
        };
        m
    ];
    let mut y0 = ValueEstimate {
        value: if m == 0 { y[[0, 0]] } else { 0.0 },
        std_error: 0.0,
        n_paths: n,
        truncation_frequency: ensemble.truncation_frequency(),
    };

    // Left-endpoint running integral of V from the anchor, updated as the
    // backward pass visits each step; values at step k use nodes < k+1.
    let mut integral_at = vec![vec![0.0; n]; m + 1];
    for k in 0..m {
        let dt = grid.dt(anchor + k)?;
        for p in 0..n {
            integral_at[k + 1][p] = integral_at[k][p] + ensemble.v()[[p, k]] * dt;
        }
    }

    let fv_table = if options.basis.include_forward_variance {
        Some(forward_variance_table(ensemble)?)
    } else {
        None
    };

    // Accumulated driver contributions per path, for the telescoped initial
    // value's Monte Carlo standard error.
    let mut driver_total = vec![0.0; n];

    for k in (0..m).rev() {
        let dt = grid.dt(anchor + k)?;
        let t_k = grid.node(anchor + k)?;
        let fv_col: Option<Vec<f64>> = fv_table
            .as_ref()
            .map(|fv| (0..n).map(|p| fv[[p, k]]).collect());
        let features = step_features(
            ensemble,
            k,
            &options.basis,
            payoff,
            &integral_at[k],
            fv_col.as_deref(),
        );
        let factor = DesignFactor::new(&features.design, options.condition_limit)?;

        let y_next: Vec<f64> = (0..n).map(|p| y[[p, k + 1]]).collect();
        let fit_y = factor.fit(&y_next);

        // Control-variated integrand targets.
        let mut tgt1 = vec![0.0; n];
        let mut tgt2 = vec![0.0; n];
        for p in 0..n {
            let u = y_next[p] - fit_y.fitted[p];
            tgt1[p] = u * ensemble.db()[[p, k]] / dt;
            tgt2[p] = u * ensemble.dw()[[p, k]] / dt;
        }
        let fit_z1 = factor.fit(&tgt1);
        let fit_z2 = factor.fit(&tgt2);

        for p in 0..n {
            let cont = fit_y.fitted[p];
            let mut y_new = cont;
            let mut f_last = 0.0;
            for _ in 0..options.picard_sweeps {
                f_last = driver.eval(DriverArgs {
                    t: t_k,
                    s: ensemble.x()[[p, k]].exp(),
                    y: y_new,
                    z1: fit_z1.fitted[p],
                    z2: fit_z2.fitted[p],
                });
                y_new = cont + f_last * dt;
            }
            driver_total[p] += f_last * dt;
            y[[p, k]] = y_new;
            y_cont[[p, k]] = cont;
            z1[[p, k]] = fit_z1.fitted[p];
            z2[[p, k]] = fit_z2.fitted[p];
            y_cont_se[[p, k]] = fit_y.pred_se[p];
            z1_se[[p, k]] = fit_z1.pred_se[p];
            z2_se[[p, k]] = fit_z2.pred_se[p];
        }

        diagnostics[k] = StepDiagnostics {
            node: anchor + k,
            condition: factor.condition(),
            rank: factor.rank(),
            r_squared_y: fit_y.r_squared,
            r_squared_z1: fit_z1.r_squared,
            r_squared_z2: fit_z2.r_squared,
        };

    }

    if m > 0 {
        // Every fit carries an intercept, so the fitted means telescope:
        // mean(Y_0) equals the sample mean of the per-path totals
        // (terminal payoff plus the accumulated driver terms). The honest
        // Monte Carlo scale of the initial value is therefore the SE of
        // those totals, not the conditional prediction SE of the final fit,
        // which would treat the chained coefficients as fixed and understate.
        let totals: Vec<f64> = (0..n).map(|p| y[[p, m]] + driver_total[p]).collect();
        let (_, se) = mean_and_se(&totals);
        y0 = ValueEstimate {
            value: y[[0, 0]],
            std_error: se,
            n_paths: n,
            truncation_frequency: ensemble.truncation_frequency(),
        };
    }

    Ok(BsdeSolution {
        grid: grid.clone(),
        anchor,
        y,
        y_cont,
        z1,
        z2,
        y_cont_se,
        z1_se,
        z2_se,
        diagnostics,
        y0,
    })
}

/// Per-step martingale-residual diagnostics.
///
/// Each statistic is normalized by the empirical spread of its *exact
/// in-sample null representation*, not by the residual's own standard
/// deviation. With intercept-bearing fits the residual sums obey exact
/// identities — `sum r = -sum(z1 dB + z2 dW)` and
/// `sum r dW = sum z2 (dt - dW^2) - sum z1 dB dW` — so under an honest
/// solve each statistic is a self-normalized sum of mean-zero terms and is
/// asymptotically standard normal. Normalizing by `sd(r)` instead would
/// inflate every statistic by the ratio of the fitted-integrand scale to
/// the residual scale (an order of magnitude for tight fits) and flag
/// honest solves.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepResidual {
    /// Absolute node index of the step's left endpoint.
    pub node: usize,
    /// Mean residual and its null-scale standard error.
    pub mean: f64,
    pub se: f64,
    /// `mean / se`: detects drift (value corruption) left in the residual.
    pub drift_z: f64,
    /// Self-normalized statistics of `mean(r * dW)` and `mean(r * dB)`:
    /// detect a mis-scaled or mis-assigned integrand, which shifts the
    /// covariance of the residual with that increment.
    pub loading_w_t: f64,
    pub loading_b_t: f64,
}

impl StepResidual {
    /// Whether any statistic breaches the threshold.
    pub fn flagged(&self, threshold: f64) -> bool {
        self.drift_z.abs() > threshold
            || self.loading_w_t.abs() > threshold
            || self.loading_b_t.abs() > threshold
    }
}

/// Martingale-residual report for a solved backward equation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub steps: Vec<StepResidual>,
    /// Flagging threshold used.
    pub threshold: f64,
    /// Steps whose statistics breached the threshold.
    pub flagged_steps: Vec<usize>,
}

impl MartingaleReport {
    pub fn is_clean(&self) -> bool {
        self.flagged_steps.is_empty()
    }
}

/// Default flagging threshold for residual statistics.
pub const RESIDUAL_THRESHOLD: f64 = 4.0;

/// A sum self-normalized by the centered spread of null-representation
/// terms: `sum(num) / sqrt(sum (h - mean h)^2)`, guarded against a zero
/// denominator (both zero means an exactly degenerate step, statistic 0).
fn self_normalized(num_total: f64, h: &[f64]) -> f64 {
    let n = h.len() as f64;
    let h_mean = h.iter().sum::<f64>() / n;
    let spread: f64 = h.iter().map(|v| (v - h_mean) * (v - h_mean)).sum();
    let denom = spread.sqrt();
    if denom > 0.0 {
        num_total / denom
    } else if num_total == 0.0 {
        0.0
    } else {
        num_total / (1e-12 * (1.0 + num_total.abs()))
    }
}

/// Check the discrete martingale property of a solution on its ensemble.
///
/// The residual of step `k` is
/// `r = Y_{k+1} - cont_k - Z1 dB_k - Z2 dW_k`; an honest solve leaves it
/// centered (drift statistic) and uncovariant with both increments
/// (loading statistics). A mis-scaled integrand leaves the mean untouched
/// but shows up as a nonzero increment loading; a shifted value shows up in
/// the drift. See [`StepResidual`] for the null scales that calibrate each
/// statistic.
pub fn martingale_residual(
    solution: &BsdeSolution,
    ensemble: &PathEnsemble,
    threshold: f64,
) -> Result<MartingaleReport> {
    let m = solution.n_local_steps();
    let n = solution.n_paths();
    if ensemble.n_paths() != n || ensemble.n_local_steps() != m {
        return Err(Error::InvalidParameter(
            "solution and ensemble shapes do not match".into(),
        ));
    }
    let grid = &solution.grid;
    let mut steps = Vec::with_capacity(m);
    let mut flagged = Vec::new();
    for k in 0..m {
        let dt = grid.dt(solution.anchor + k)?;
        let mut sum_r = 0.0;
        let mut sum_r_dw = 0.0;
        let mut sum_r_db = 0.0;
        // Honest-null representations of the per-path contributions to the
        // three sums (exact identities under intercept-bearing fits).
        let mut g = vec![0.0; n];
        let mut h_w = vec![0.0; n];
        let mut h_b = vec![0.0; n];
        for p in 0..n {
            let dw = ensemble.dw()[[p, k]];
            let db = ensemble.db()[[p, k]];
            let z1 = solution.z1[[p, k]];
            let z2 = solution.z2[[p, k]];
            let r = solution.y[[p, k + 1]] - solution.y_cont[[p, k]] - z1 * db - z2 * dw;
            sum_r += r;
            sum_r_dw += r * dw;
            sum_r_db += r * db;
            g[p] = -(z1 * db + z2 * dw);
            h_w[p] = z2 * (dt - dw * dw) - z1 * db * dw;
            h_b[p] = z1 * (dt - db * db) - z2 * db * dw;
        }
        let drift_z = self_normalized(sum_r, &g);
        let loading_w_t = self_normalized(sum_r_dw, &h_w);
        let loading_b_t = self_normalized(sum_r_db, &h_b);
        let mean = sum_r / n as f64;
        let se = if drift_z != 0.0 { mean / drift_z } else { 0.0 };
        let step = StepResidual {
            node: solution.anchor + k,
            mean,
            se: se.abs(),
            drift_z,
            loading_w_t,
            loading_b_t,
        };
        if step.flagged(threshold) {
            flagged.push(solution.anchor + k);
        }
        steps.push(step);
    }
    Ok(MartingaleReport {
        steps,
        threshold,
        flagged_steps: flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::paths::{simulate_joint, ModelParams};
    use crate::stats::correlation;

    fn gbm_params(rho: f64) -> ModelParams {
        ModelParams::new(rho, 100.0_f64.ln(), 0.04, Kernel::zero()).unwrap()
    }

    fn rough_params() -> ModelParams {
        let kernel = Kernel::riemann_liouville(0.3, 0.3).unwrap();
        ModelParams::new(-0.7, 100.0_f64.ln(), 0.04, kernel).unwrap()
    }

    #[test]
    fn one_step_value_is_the_sample_mean() {
        let params = gbm_params(0.0);
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let ens = simulate_joint(&params, &grid, 4_000, 3).unwrap();
        let payoff = Payoff::Call { strike: 100.0 };
        let sol = solve_bsde(&ens, payoff, &Driver::Zero, &SolverOptions::default()).unwrap();
        let mean: f64 = (0..4_000)
            .map(|p| payoff.eval_log(ens.x()[[p, 1]]))
            .sum::<f64>()
            / 4_000.0;
        assert!((sol.y0.value - mean).abs() < 1e-12);
        assert!(sol.y0.std_error > 0.0);
    }

    #[test]
    fn terminal_column_is_the_payoff_bitwise() {
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 256, 5).unwrap();
        let payoff = Payoff::Put { strike: 95.0 };
        let sol = solve_bsde(&ens, payoff, &Driver::Zero, &SolverOptions::default()).unwrap();
        for p in 0..256 {
            assert_eq!(
                sol.y()[[p, 8]].to_bits(),
                payoff.eval_log(ens.x()[[p, 8]]).to_bits()
            );
        }
    }

    #[test]
    fn martingale_payoff_reproduces_the_forward() {
        // Identity payoff, zero driver: Y is the price martingale, so Y_0
        // must match the initial price and the paths must track S closely.
        let params = gbm_params(-0.3);
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 20_000, 7).unwrap();
        let sol =
            solve_bsde(&ens, Payoff::Identity, &Driver::Zero, &SolverOptions::default()).unwrap();
        assert!(
            (sol.y0.value - 100.0).abs() < 5.0 * sol.y0.std_error,
            "y0 {} (se {})",
            sol.y0.value,
            sol.y0.std_error
        );
        let mid = 4;
        let s: Vec<f64> = (0..20_000).map(|p| ens.x()[[p, mid]].exp()).collect();
        let yk: Vec<f64> = (0..20_000).map(|p| sol.y()[[p, mid]]).collect();
        assert!(correlation(&s, &yk) > 0.999);
    }

    #[test]
    fn integrand_levels_match_constant_volatility() {
        // Zero kernel: the exact integrands are Z2 = rho sigma S and
        // Z1 = rho_bar sigma S. Compare fitted cross-sections at mid-grid.
        let rho = -0.6_f64;
        let params = gbm_params(rho);
        let sigma = 0.2;
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let n = 50_000;
        let ens = simulate_joint(&params, &grid, n, 11).unwrap();
        let sol =
            solve_bsde(&ens, Payoff::Identity, &Driver::Zero, &SolverOptions::default()).unwrap();
        let mid = 4;
        let mut ratio2 = 0.0;
        let mut ratio1 = 0.0;
        for p in 0..n {
            let s = ens.x()[[p, mid]].exp();
            ratio2 += sol.z2()[[p, mid]] / (rho * sigma * s);
            ratio1 += sol.z1()[[p, mid]] / (params.rho_bar * sigma * s);
        }
        ratio2 /= n as f64;
        ratio1 /= n as f64;
        assert!(
            (ratio2 - 1.0).abs() < 0.05,
            "variance-driver integrand ratio {ratio2}"
        );
        assert!(
            (ratio1 - 1.0).abs() < 0.05,
            "price-driver integrand ratio {ratio1}"
        );
    }

    #[test]
    fn discounting_scales_the_zero_driver_solution() {
        // f = -r y telescopes to (1 - r dt)^m times the zero-driver value,
        // exactly at the regression level (up to float rounding) because
        // least squares is scale-equivariant.
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 4_000, 13).unwrap();
        let payoff = Payoff::Call { strike: 100.0 };
        let plain =
            solve_bsde(&ens, payoff, &Driver::Zero, &SolverOptions::default()).unwrap();
        let rate = 0.05;
        let discounted = solve_bsde(
            &ens,
            payoff,
            &Driver::LinearDiscount { rate },
            &SolverOptions::default(),
        )
        .unwrap();
        let factor = (1.0 - rate * 0.125_f64).powi(8);
        let rel = (discounted.y0.value - factor * plain.y0.value).abs() / plain.y0.value;
        assert!(rel < 1e-12, "relative gap {rel:.3e}");
    }

    #[test]
    fn comparison_across_strikes() {
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let ens = simulate_joint(&params, &grid, 4_000, 17).unwrap();
        let low = solve_bsde(
            &ens,
            Payoff::Call { strike: 90.0 },
            &Driver::Zero,
            &SolverOptions::default(),
        )
        .unwrap();
        let high = solve_bsde(
            &ens,
            Payoff::Call { strike: 110.0 },
            &Driver::Zero,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(low.y0.value > high.y0.value);
    }

    #[test]
    fn honest_solution_passes_residual_checks() {
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 20_000, 19).unwrap();
        let sol = solve_bsde(
            &ens,
            Payoff::Call { strike: 100.0 },
            &Driver::Zero,
            &SolverOptions::default(),
        )
        .unwrap();
        let report = martingale_residual(&sol, &ens, RESIDUAL_THRESHOLD).unwrap();
        assert!(
            report.is_clean(),
            "flagged steps: {:?}",
            report.flagged_steps
        );
    }

    #[test]
    fn scaled_integrand_is_flagged_by_loadings() {
        // Doubling Z2 leaves every residual mean at zero in expectation, so
        // a mean test alone cannot see it; the increment loading does.
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 20_000, 23).unwrap();
        let mut sol = solve_bsde(
            &ens,
            Payoff::Call { strike: 100.0 },
            &Driver::Zero,
            &SolverOptions::default(),
        )
        .unwrap();
        for p in 0..sol.n_paths() {
            for k in 0..sol.n_local_steps() {
                sol.z2[[p, k]] *= 2.0;
            }
        }
        let report = martingale_residual(&sol, &ens, RESIDUAL_THRESHOLD).unwrap();
        assert!(
            !report.is_clean(),
            "doubled integrand must be flagged somewhere"
        );
        let worst = report
            .steps
            .iter()
            .map(|s| s.loading_w_t.abs())
            .fold(0.0_f64, f64::max);
        assert!(worst > 10.0, "worst W loading only {worst}");
    }

    #[test]
    fn swapped_integrands_are_flagged() {
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 20_000, 29).unwrap();
        let mut sol = solve_bsde(
            &ens,
            Payoff::Call { strike: 100.0 },
            &Driver::Zero,
            &SolverOptions::default(),
        )
        .unwrap();
        std::mem::swap(&mut sol.z1, &mut sol.z2);
        let report = martingale_residual(&sol, &ens, RESIDUAL_THRESHOLD).unwrap();
        assert!(!report.is_clean(), "swapped integrands must be flagged");
    }

    #[test]
    fn unstable_driver_is_rejected() {
        let params = gbm_params(0.0);
        let grid = TimeGrid::uniform(1.0, 2).unwrap(); // dt = 0.5
        let ens = simulate_joint(&params, &grid, 100, 1).unwrap();
        let driver = Driver::LinearDiscount { rate: 2.5 }; // 2.5 * 0.5 >= 1
        match solve_bsde(
            &ens,
            Payoff::Identity,
            &driver,
            &SolverOptions::default(),
        ) {
            Err(Error::LipschitzViolation(_)) => {}
            other => panic!("expected LipschitzViolation, got {other:?}"),
        }
        let custom = Driver::Custom {
            name: "bad".into(),
            lipschitz: f64::NAN,
            f: Arc::new(|_| 0.0),
        };
        assert!(custom.validate(0.1).is_err());
    }

    #[test]
    fn custom_driver_matches_linear_discount() {
        let params = gbm_params(0.0);
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let ens = simulate_joint(&params, &grid, 2_000, 31).unwrap();
        let payoff = Payoff::Call { strike: 100.0 };
        let a = solve_bsde(
            &ens,
            payoff,
            &Driver::LinearDiscount { rate: 0.03 },
            &SolverOptions::default(),
        )
        .unwrap();
        let custom = Driver::Custom {
            name: "discount".into(),
            lipschitz: 0.03,
            f: Arc::new(|args: DriverArgs| -0.03 * args.y),
        };
        let b = solve_bsde(&ens, payoff, &custom, &SolverOptions::default()).unwrap();
        assert_eq!(a.y0.value.to_bits(), b.y0.value.to_bits());
    }

    #[test]
    fn forward_variance_feature_solves_too() {
        let params = rough_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = simulate_joint(&params, &grid, 2_000, 37).unwrap();
        let options = SolverOptions {
            basis: BasisSpec {
                include_forward_variance: true,
                ..BasisSpec::default()
            },
            ..SolverOptions::default()
        };
        let sol = solve_bsde(&ens, Payoff::Call { strike: 100.0 }, &Driver::Zero, &options)
            .unwrap();
        assert!(sol.y0.value.is_finite());
        // The extra column must survive screening somewhere mid-grid (it is
        // collinear with v at the first step only).
        assert!(sol.diagnostics[4].rank > sol.diagnostics[0].rank);
    }
}
