//! Bump-and-revalue estimators for the two state derivatives of the value
//! function: the log-price derivative `d/dx u` and the directional curve
//! (Gateaux) derivative `<d/domega u, direction>`.
//!
//! Both estimators use common random numbers: the bumped valuations replay
//! the *same* simulated noises, so the per-path differences cancel everything
//! the bump does not touch. For the log-price this is exact by structure —
//! the scheme is additive in the starting point, so bumping `x` shifts every
//! node of the path by exactly the bump. For the curve it exploits that the
//! variance fold is affine in the curve values: `V` under `curve + eps * dir`
//! is `V + eps * dir` node by node, and only the log-price needs replaying.
//!
//! A Richardson companion estimate at `eps / 2` is always computed from the
//! same paths; comparing the pair across bump sizes exposes the `O(eps^2)`
//! bias of the central scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::{conditional_forward, x_terminal, ForwardCurve, ModelParams};
use crate::stats::mean_and_se;
use crate::valuation::Payoff;

/// Finite-difference scheme for the bump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpScheme {
    /// `(f(+eps) - f(-eps)) / (2 eps)`, bias `O(eps^2)`.
    #[default]
    Central,
    /// `(f(+eps) - f(0)) / eps`, bias `O(eps)`.
    Forward,
}

/// Bump sizes for the two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    /// Log-price bump.
    pub eps_x: f64,
    /// Curve bump amplitude.
    pub eps_omega: f64,
    /// Differencing scheme.
    pub scheme: BumpScheme,
}

impl BumpSpec {
    /// Standard bump sizes for a state: `eps_x = 1e-3 * max(1, |x|)`,
    /// `eps_omega = 1e-2 * v0`, central differencing.
    pub fn standard(x: f64, v0: f64) -> Self {
        BumpSpec {
            eps_x: 1e-3 * x.abs().max(1.0),
            eps_omega: 1e-2 * v0,
            scheme: BumpScheme::Central,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps_x > 0.0 && self.eps_x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eps_x must be positive and finite, got {}",
                self.eps_x
            )));
        }
        if !(self.eps_omega > 0.0 && self.eps_omega.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eps_omega must be positive and finite, got {}",
                self.eps_omega
            )));
        }
        Ok(())
    }
}

/// A finite-difference derivative estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeEstimate {
    /// Estimate at `eps_used`.
    pub value: f64,
    /// Standard error of the per-path differenced estimator.
    pub std_error: f64,
    /// Bump size of `value`.
    pub eps_used: f64,
    /// `(estimate at eps, estimate at eps/2)` from the same paths.
    pub richardson_pair: Option<(f64, f64)>,
}

/// Direction of a curve bump.
///
/// Kernel-type directions act on strictly-future nodes only: they represent
/// the response of the curve to the increment over `[t, t + dt]`, which
/// cannot move the anchor value (and the point kernel may diverge there).
/// Finite ad-hoc directions (`Constant`, `Custom`) bump every covered node
/// including the anchor, whose value feeds the first step of the log-price
/// scheme.
pub enum BumpDirection<'a> {
    /// The model kernel shifted to the anchor time, `s -> K(s - t)`: the
    /// continuous-time pairing direction of the variance identity. Zero at
    /// the anchor node.
    ShiftedKernel,
    /// The model's cell-averaged loading of the first future increment,
    /// `s -> (1/dt) int_t^{t+dt} K(s - r) dr`: the exact direction by which
    /// the increment over `[t, t + dt]` moves the discrete curve. Zero at
    /// the anchor node; coincides with [`BumpDirection::ShiftedKernel`] for
    /// constant and `hurst = 1/2` kernels.
    IncrementLoading,
    /// Constant `1` on every covered node (a parallel curve shift).
    Constant,
    /// Arbitrary values as a function of absolute node time.
    Custom(&'a dyn Fn(f64) -> f64),
}

/// Tabulate a direction on the local nodes of `[t_index, n]`.
fn direction_table(
    direction: &BumpDirection<'_>,
    params: &ModelParams,
    grid: &TimeGrid,
    t_index: usize,
) -> Result<Vec<f64>> {
    let n = grid.n_steps();
    let t_anchor = grid.node(t_index)?;
    let mut dir = Vec::with_capacity(n - t_index + 1);
    let anchor_value = match direction {
        BumpDirection::ShiftedKernel | BumpDirection::IncrementLoading => 0.0,
        BumpDirection::Constant => 1.0,
        BumpDirection::Custom(f) => f(t_anchor),
    };
    if !anchor_value.is_finite() {
        return Err(Error::DirectionSingularity {
            node: t_index,
            t: t_anchor,
        });
    }
    dir.push(anchor_value);
    if t_index < n {
        let cell_end = grid.node(t_index + 1)?;
        for node in (t_index + 1)..=n {
            let s = grid.node(node)?;
            let value = match direction {
                BumpDirection::ShiftedKernel => params.kernel.shifted(t_anchor).eval(s)?,
                BumpDirection::IncrementLoading => {
                    params.kernel.cell_average(s, t_anchor, cell_end)?
                }
                BumpDirection::Constant => 1.0,
                BumpDirection::Custom(f) => f(s),
            };
            if !value.is_finite() {
                return Err(Error::DirectionSingularity { node, t: s });
            }
            dir.push(value);
        }
    }
    Ok(dir)
}

/// Estimate `d/dx u(t, curve, x)` for the payoff by central (or forward)
/// differences with common random numbers.
///
/// The log-price scheme is additive in its starting point, so the same
/// simulated ensemble serves every bump exactly: terminals are shifted by the
/// bump and the payoff differenced path by path.
#[allow(clippy::too_many_arguments)]
pub fn dx_u(
    params: &ModelParams,
    grid: &TimeGrid,
    t_index: usize,
    curve: &ForwardCurve,
    x: f64,
    payoff: Payoff,
    bump: &BumpSpec,
    n_paths: usize,
    seed: u64,
) -> Result<DerivativeEstimate> {
    payoff.validate()?;
    bump.validate()?;
    let ens = conditional_forward(params, grid, t_index, curve, x, n_paths, seed)?;
    let m = ens.n_local_steps();
    let eps = bump.eps_x;

    let diff_at = |eps: f64| -> Vec<f64> {
        (0..n_paths)
            .map(|p| {
                let xt = ens.x()[[p, m]];
                match bump.scheme {
                    BumpScheme::Central => {
                        (payoff.eval_log(xt + eps) - payoff.eval_log(xt - eps)) / (2.0 * eps)
                    }
                    BumpScheme::Forward => {
                        (payoff.eval_log(xt + eps) - payoff.eval_log(xt)) / eps
                    }
                }
            })
            .collect()
    };

    let d = diff_at(eps);
    let d_half = diff_at(0.5 * eps);
    let (value, std_error) = mean_and_se(&d);
    let (value_half, _) = mean_and_se(&d_half);
    Ok(DerivativeEstimate {
        value,
        std_error,
        eps_used: eps,
        richardson_pair: Some((value, value_half)),
    })
}

/// Estimate the directional curve derivative `<d/domega u, direction>` at
/// `(t, curve, x)` by bump-and-revalue with common random numbers.
///
/// The base conditional ensemble is drawn once; each bumped valuation adds
/// `s * eps * direction` to the variance path (exact, by affinity of the
/// fold in the curve) and replays the log-price with the same noises.
#[allow(clippy::too_many_arguments)]
pub fn gateaux_omega_u(
    params: &ModelParams,
    grid: &TimeGrid,
    t_index: usize,
    curve: &ForwardCurve,
    x: f64,
    payoff: Payoff,
    direction: &BumpDirection<'_>,
    bump: &BumpSpec,
    n_paths: usize,
    seed: u64,
) -> Result<DerivativeEstimate> {
    payoff.validate()?;
    bump.validate()?;
    let dir = direction_table(direction, params, grid, t_index)?;
    let ens = conditional_forward(params, grid, t_index, curve, x, n_paths, seed)?;
    let m = ens.n_local_steps();
    let dts: Vec<f64> = (t_index..grid.n_steps())
        .map(|k| grid.dt(k))
        .collect::<Result<_>>()?;
    let eps = bump.eps_omega;

    // Terminal log-price under `curve + s * dir`, replayed with the path's
    // own noises; `s = 0` reproduces the stored terminal bitwise.
    let bumped_terminal = |p: usize, s: f64, v_bumped: &mut [f64]| -> f64 {
        for j in 0..=m {
            v_bumped[j] = ens.v()[[p, j]] + s * dir[j];
        }
        let dw: Vec<f64> = (0..m).map(|k| ens.dw()[[p, k]]).collect();
        let db: Vec<f64> = (0..m).map(|k| ens.db()[[p, k]]).collect();
        x_terminal(params, &dts, v_bumped, &dw, &db, x)
    };

    let mut d = vec![0.0; n_paths];
    let mut d_half = vec![0.0; n_paths];
    let mut v_buf = vec![0.0; m + 1];
    for p in 0..n_paths {
        match bump.scheme {
            BumpScheme::Central => {
                let up = payoff.eval_log(bumped_terminal(p, eps, &mut v_buf));
                let dn = payoff.eval_log(bumped_terminal(p, -eps, &mut v_buf));
                let up_h = payoff.eval_log(bumped_terminal(p, 0.5 * eps, &mut v_buf));
                let dn_h = payoff.eval_log(bumped_terminal(p, -0.5 * eps, &mut v_buf));
                d[p] = (up - dn) / (2.0 * eps);
                d_half[p] = (up_h - dn_h) / eps;
            }
            BumpScheme::Forward => {
                let base = payoff.eval_log(ens.x()[[p, m]]);
                let up = payoff.eval_log(bumped_terminal(p, eps, &mut v_buf));
                let up_h = payoff.eval_log(bumped_terminal(p, 0.5 * eps, &mut v_buf));
                d[p] = (up - base) / eps;
                d_half[p] = (up_h - base) / (0.5 * eps);
            }
        }
    }

    let (value, std_error) = mean_and_se(&d);
    let (value_half, _) = mean_and_se(&d_half);
    Ok(DerivativeEstimate {
        value,
        std_error,
        eps_used: eps,
        richardson_pair: Some((value, value_half)),
    })
}
