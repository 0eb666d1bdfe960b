//! vfbl — Volterra forward–backward laboratory.
//!
//! A numerical workbench for variance processes of Volterra type,
//! `V_s = omega_s + int_0^s K(s - r) dW_r`, coupled to a log-price
//! `dX = -1/2 chi(V)^2 dt + chi(V) (rho dW + rho_bar dB)`. The crate
//! simulates the pair exactly in law (Gaussian Cholesky), prices payoffs by
//! conditional Monte Carlo, solves the associated backward equations by
//! least-squares regression, estimates pathwise state/curve derivatives by
//! bump-and-revalue under common random numbers, and cross-checks the
//! structural identities tying the backward Z components to those
//! derivatives.
//!
//! Modules mirror the pipeline: [`kernel`] → [`paths`] → [`valuation`] →
//! [`bsde`] → [`pathderiv`] → [`identify`], with [`config`] describing a full
//! experiment for the CLI driver.

pub mod bsde;
pub mod config;
pub mod error;
pub mod grid;
pub mod identify;
pub mod io;
pub mod kernel;
pub mod pathderiv;
pub mod paths;
mod quad;
mod regression;
pub mod rng;
pub mod stats;
pub mod valuation;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use kernel::Kernel;
pub use paths::{ForwardCurve, ModelParams, PathEnsemble};
