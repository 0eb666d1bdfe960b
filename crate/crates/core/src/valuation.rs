//! Terminal payoffs and plain Monte Carlo valuation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::{conditional_forward, simulate_joint, ForwardCurve, ModelParams, PathEnsemble};
use crate::stats::mean_and_se;

/// Terminal payoff, evaluated on the terminal log-price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Payoff {
    /// `(S - strike)^+` with `S = exp(x)`.
    Call { strike: f64 },
    /// `(strike - S)^+`.
    Put { strike: f64 },
    /// `1{S >= strike}`.
    Digital { strike: f64 },
    /// `S` itself (the forward).
    Identity,
}

impl Payoff {
    /// Validate strike positivity where a strike exists.
    pub fn validate(&self) -> Result<()> {
        let strike = match self {
            Payoff::Call { strike } | Payoff::Put { strike } | Payoff::Digital { strike } => {
                *strike
            }
            Payoff::Identity => return Ok(()),
        };
        if strike > 0.0 && strike.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "strike must be positive and finite, got {strike}"
            )))
        }
    }

    /// Evaluate on a terminal log-price.
    pub fn eval_log(&self, x: f64) -> f64 {
        let s = x.exp();
        match self {
            Payoff::Call { strike } => (s - strike).max(0.0),
            Payoff::Put { strike } => (strike - s).max(0.0),
            Payoff::Digital { strike } => {
                if s >= *strike {
                    1.0
                } else {
                    0.0
                }
            }
            Payoff::Identity => s,
        }
    }
}

/// A Monte Carlo value with its sampling error and simulation diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    /// Sample mean of the payoff.
    pub value: f64,
    /// Standard error of the mean.
    pub std_error: f64,
    /// Number of paths behind the estimate.
    pub n_paths: usize,
    /// Fraction of chi evaluations that hit the truncation.
    pub truncation_frequency: f64,
}

/// Evaluate a payoff on the terminal column of an ensemble.
pub fn value_from_ensemble(ensemble: &PathEnsemble, payoff: Payoff) -> Result<ValueEstimate> {
    payoff.validate()?;
    let last = ensemble.n_local_nodes() - 1;
    let samples: Vec<f64> = (0..ensemble.n_paths())
        .map(|p| payoff.eval_log(ensemble.x()[[p, last]]))
        .collect();
    let (value, std_error) = mean_and_se(&samples);
    Ok(ValueEstimate {
        value,
        std_error,
        n_paths: ensemble.n_paths(),
        truncation_frequency: ensemble.truncation_frequency(),
    })
}

/// Price a payoff from the initial state by plain Monte Carlo.
pub fn price(
    params: &ModelParams,
    grid: &TimeGrid,
    payoff: Payoff,
    n_paths: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    let ensemble = simulate_joint(params, grid, n_paths, seed)?;
    value_from_ensemble(&ensemble, payoff)
}

/// Price a payoff conditionally on the state `(curve, x)` at node `t_index`.
///
/// At `t_index == n` no simulation happens and the result is the payoff at
/// `x` with zero standard error.
pub fn price_from_state(
    params: &ModelParams,
    grid: &TimeGrid,
    t_index: usize,
    curve: &ForwardCurve,
    x: f64,
    payoff: Payoff,
    n_paths: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    if t_index == grid.n_steps() {
        payoff.validate()?;
        return Ok(ValueEstimate {
            value: payoff.eval_log(x),
            std_error: 0.0,
            n_paths,
            truncation_frequency: 0.0,
        });
    }
    let ensemble = conditional_forward(params, grid, t_index, curve, x, n_paths, seed)?;
    value_from_ensemble(&ensemble, payoff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::paths::theta_curve;

    /// Black-Scholes call on S0 = K = 100, sigma = 0.2, T = 1 (frozen from an
    /// independent evaluation of the closed form).
    const BS_ATM_CALL: f64 = 7.965567455405804;

    fn gbm_params() -> ModelParams {
        ModelParams::new(-0.3, 100.0_f64.ln(), 0.04, Kernel::zero()).unwrap()
    }

    #[test]
    fn zero_kernel_call_matches_black_scholes() {
        // With the zero kernel the log-price is exactly Gaussian at every
        // step count, so the only error is statistical.
        let params = gbm_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let est = price(&params, &grid, Payoff::Call { strike: 100.0 }, 40_000, 7).unwrap();
        assert!(est.std_error > 0.0);
        assert!(
            (est.value - BS_ATM_CALL).abs() < 5.0 * est.std_error,
            "price {} vs {} (se {})",
            est.value,
            BS_ATM_CALL,
            est.std_error
        );
        assert_eq!(est.truncation_frequency, 0.0);
    }

    #[test]
    fn forward_is_a_martingale() {
        let params = gbm_params();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let est = price(&params, &grid, Payoff::Identity, 40_000, 11).unwrap();
        assert!(
            (est.value - 100.0).abs() < 5.0 * est.std_error,
            "forward {} (se {})",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn payoff_shapes_are_ordered() {
        let params = gbm_params();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let low = price(&params, &grid, Payoff::Call { strike: 90.0 }, 5_000, 3).unwrap();
        let high = price(&params, &grid, Payoff::Call { strike: 110.0 }, 5_000, 3).unwrap();
        assert!(low.value > high.value);
        let digital = price(&params, &grid, Payoff::Digital { strike: 100.0 }, 5_000, 3).unwrap();
        assert!((0.0..=1.0).contains(&digital.value));
    }

    #[test]
    fn put_call_parity_within_noise() {
        // Same seed, same paths: C - P = S_T mean - K exactly per path.
        let params = gbm_params();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let call = price(&params, &grid, Payoff::Call { strike: 100.0 }, 20_000, 5).unwrap();
        let put = price(&params, &grid, Payoff::Put { strike: 100.0 }, 20_000, 5).unwrap();
        let fwd = price(&params, &grid, Payoff::Identity, 20_000, 5).unwrap();
        let lhs = call.value - put.value;
        let rhs = fwd.value - 100.0;
        assert!((lhs - rhs).abs() < 1e-10, "parity broken: {lhs} vs {rhs}");
    }

    #[test]
    fn terminal_state_price_is_exact_payoff() {
        let params = gbm_params();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let curve = ForwardCurve::new(4, vec![0.04]).unwrap();
        let x = 105.0_f64.ln();
        let est =
            price_from_state(&params, &grid, 4, &curve, x, Payoff::Call { strike: 100.0 }, 10, 1)
                .unwrap();
        assert!((est.value - 5.0).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn conditional_price_from_simulated_state_runs() {
        let kernel = Kernel::riemann_liouville(0.3, 0.5).unwrap();
        let params = ModelParams::new(-0.7, 100.0_f64.ln(), 0.04, kernel).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let outer = simulate_joint(&params, &grid, 4, 21).unwrap();
        let theta = theta_curve(&outer, 2, 4).unwrap();
        let est = price_from_state(
            &params,
            &grid,
            4,
            &theta,
            outer.x()[[2, 4]],
            Payoff::Call { strike: 100.0 },
            2_000,
            9,
        )
        .unwrap();
        assert!(est.value.is_finite());
        assert!(est.std_error > 0.0);
    }

    #[test]
    fn invalid_strike_is_rejected() {
        assert!(Payoff::Call { strike: -1.0 }.validate().is_err());
        assert!(Payoff::Digital { strike: 0.0 }.validate().is_err());
        assert!(Payoff::Identity.validate().is_ok());
    }
}
