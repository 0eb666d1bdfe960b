//! Independent closed-form oracles for the acceptance suite.
//!
//! Everything here is evaluated with `statrs` primitives, not with any code
//! under test, so an agreement between a Monte Carlo estimate and one of
//! these values is a genuine two-sided check. The frozen constants pinned in
//! the acceptance tests were computed from an external evaluation of the
//! same closed forms; each oracle is asserted against its frozen value
//! before being trusted.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    standard_normal().cdf(z)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    standard_normal().pdf(z)
}

fn d1(s0: f64, strike: f64, total_variance: f64) -> f64 {
    let sd = total_variance.sqrt();
    ((s0 / strike).ln() + 0.5 * total_variance) / sd
}

/// Black–Scholes call price in terms of spot, strike, and total variance
/// `w = sigma^2 * T` (zero rate).
pub fn bs_call(s0: f64, strike: f64, total_variance: f64) -> f64 {
    let d1 = d1(s0, strike, total_variance);
    let d2 = d1 - total_variance.sqrt();
    s0 * norm_cdf(d1) - strike * norm_cdf(d2)
}

/// Derivative of the call price in the log-spot: `s0 * N(d1)`.
pub fn bs_log_delta(s0: f64, strike: f64, total_variance: f64) -> f64 {
    s0 * norm_cdf(d1(s0, strike, total_variance))
}

/// Derivative of the call price in the total variance:
/// `s0 * phi(d1) / (2 sqrt(w))`.
pub fn bs_variance_vega(s0: f64, strike: f64, total_variance: f64) -> f64 {
    s0 * norm_pdf(d1(s0, strike, total_variance)) / (2.0 * total_variance.sqrt())
}
