//! Simulation of the coupled Volterra variance / log-price system.
//!
//! The variance factor is `V_s = omega_s + int_0^s K(s - r) dW_r` and the
//! log-price follows the left-point Euler scheme
//!
//! ```text
//! X_{k+1} = X_k - 1/2 chi(V_k)^2 dt_k + chi(V_k) (rho dW_k + rho_bar dB_k).
//! ```
//!
//! `(V at the nodes, cell increments of W)` is drawn from its *exact joint
//! law*. The draw is organized through the orthogonal decomposition
//!
//! ```text
//! V_j = omega_j + sum_{k<j} Abar[j,k] dW_k  +  sum_{l<=j} M[j,l] xi_l,
//! ```
//!
//! where `Abar[j,k] = (1/dt_k) int_{cell k} K(t_j - r) dr` is the
//! cell-averaged kernel weight (so `Abar dW` is exactly the conditional
//! expectation `E[V | dW]`), `dW_k ~ iid N(0, dt_k)`, and `M` is the Cholesky
//! factor of the refinement covariance `R = Sigma - Abar D Abar^T`, which is
//! positive semidefinite *by construction* (law of total variance). The
//! refinement noises `xi` are iid standard normals independent of `dW`; they
//! carry the in-cell fluctuation of `W` that the increments cannot see, and
//! are recorded in the ensemble alongside `dW` and `dB`.
//!
//! Consequences, each load-bearing:
//! - node marginals (and the whole joint law of V) are exact;
//! - `dW` is genuinely iid and independent of the past, so conditional
//!   expectations given the state filtration treat it as centered — the
//!   property every regression downstream relies on;
//! - the fold above is deterministic in `(dW, xi)`, so restarting a path at
//!   an intermediate node from its forward curve with the same future noises
//!   reproduces the original values bitwise;
//! - conditional simulation slices the lower-right blocks of the *full-grid*
//!   `Abar` and `M`, which is exactly the conditional law of the future nodes
//!   given the past noises (Cholesky block identity), for any kernel.
//!
//! For the constant kernel and `hurst = 1/2` the refinement covariance
//! vanishes (the node values are a function of the increments) and `M = 0`;
//! the zero kernel has no noise at all.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernel::Kernel;
use crate::rng::path_rng;

/// Maximum diagonal jitter tried while factorizing the refinement covariance.
const MAX_JITTER: f64 = 1e-10;
/// Acceptance bound on the covariance reconstruction residual
/// `max |Abar D Abar^T + M M^T - Sigma|`.
const MAX_FACTOR_RESIDUAL: f64 = 1e-8;
/// Relative threshold under which the refinement covariance is treated as
/// identically zero (Brownian-reducible kernels), keeping those reductions
/// bit-clean instead of polluting them with jitter noise.
const TRIVIAL_REFINEMENT: f64 = 1e-13;

/// Truncation map applied to the variance factor before it enters the
/// log-price dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chi {
    /// `chi(v) = sqrt(max(v, 0))`.
    SqrtPositivePart,
}

impl Chi {
    /// Apply the truncation map.
    pub fn eval(&self, v: f64) -> f64 {
        match self {
            Chi::SqrtPositivePart => v.max(0.0).sqrt(),
        }
    }
}

/// Model parameters for the joint system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Correlation between the variance and price drivers, in [-1, 1].
    pub rho: f64,
    /// `sqrt(1 - rho^2)`, stored so every consumer uses the same value.
    pub rho_bar: f64,
    /// Initial log-price.
    pub x0: f64,
    /// Initial variance level (the flat initial forward curve).
    pub v0: f64,
    /// Volterra kernel of the variance factor.
    pub kernel: Kernel,
    /// Variance truncation map.
    pub chi: Chi,
}

impl ModelParams {
    /// Validate and build; `rho_bar` is derived here once.
    pub fn new(rho: f64, x0: f64, v0: f64, kernel: Kernel) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::InvalidParameter(format!(
                "rho must lie in [-1, 1], got {rho}"
            )));
        }
        if !x0.is_finite() {
            return Err(Error::InvalidParameter(format!("x0 must be finite, got {x0}")));
        }
        if !(v0 > 0.0 && v0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "v0 must be positive and finite, got {v0}"
            )));
        }
        let rho_bar = (1.0 - rho * rho).max(0.0).sqrt();
        Ok(ModelParams {
            rho,
            rho_bar,
            x0,
            v0,
            kernel,
            chi: Chi::SqrtPositivePart,
        })
    }
}

/// A forward variance curve anchored at a grid node: `values[j]` is the curve
/// at absolute node `anchor + j`. At anchor 0 this is the initial curve
/// omega; at later anchors it is the conditional forward curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCurve {
    anchor: usize,
    values: Vec<f64>,
}

impl ForwardCurve {
    /// Build from explicit values (may be negative: conditional curves of a
    /// Gaussian factor are not sign-constrained).
    pub fn new(anchor: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("forward curve needs values".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "forward curve values must be finite, got {bad}"
            )));
        }
        Ok(ForwardCurve { anchor, values })
    }

    /// Flat curve at `level` covering `[t_anchor, T]` of `grid`.
    pub fn flat(grid: &TimeGrid, anchor: usize, level: f64) -> Result<Self> {
        if anchor > grid.n_steps() {
            return Err(Error::Index(format!(
                "curve anchor {anchor} beyond grid with {} steps",
                grid.n_steps()
            )));
        }
        ForwardCurve::new(anchor, vec![level; grid.n_steps() + 1 - anchor])
    }

    /// Anchor node index.
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Number of covered nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Whether the curve covers no nodes (never true for a valid curve).
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Curve value at absolute node index.
    pub fn value_at(&self, node: usize) -> Result<f64> {
        if node < self.anchor || node - self.anchor >= self.values.len() {
            return Err(Error::Index(format!(
                "curve covers nodes {}..={}, asked for {node}",
                self.anchor,
                self.anchor + self.values.len() - 1
            )));
        }
        Ok(self.values[node - self.anchor])
    }

    /// All values, local indexing from the anchor.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Full-grid noise model of the variance factor: cell-averaged increment
/// loadings and the Cholesky factor of the refinement covariance (see the
/// module docs). Rows are indexed by node `r + 1`, columns by cell `k`
/// (equivalently refinement noise `xi_{k+1}`); both matrices are lower
/// triangular in that indexing.
#[derive(Debug)]
pub(crate) struct NoiseModel {
    n: usize,
    dts: Vec<f64>,
    loading: DMatrix<f64>,
    refine: DMatrix<f64>,
    /// Whether the refinement covariance was identically zero.
    trivial_refinement: bool,
    /// `max |Abar D Abar^T + M M^T - Sigma|`.
    residual: f64,
}

impl NoiseModel {
    /// Assemble the model for a kernel on a grid. Deterministic: rebuilding
    /// with the same inputs reproduces the matrices bitwise.
    pub(crate) fn build(kernel: &Kernel, grid: &TimeGrid) -> Result<Self> {
        let n = grid.n_steps();
        let dts: Vec<f64> = (0..n).map(|k| grid.dt(k)).collect::<Result<_>>()?;
        if kernel.is_zero() || n == 0 {
            return Ok(NoiseModel {
                n,
                dts,
                loading: DMatrix::zeros(n, n),
                refine: DMatrix::zeros(n, n),
                trivial_refinement: true,
                residual: 0.0,
            });
        }

        let mut loading = DMatrix::zeros(n, n);
        for r in 0..n {
            let t = grid.node(r + 1)?;
            for k in 0..=r {
                loading[(r, k)] = kernel.cell_average(t, grid.node(k)?, grid.node(k + 1)?)?;
            }
        }

        let mut sigma = DMatrix::zeros(n, n);
        for i in 0..n {
            let ti = grid.node(i + 1)?;
            for j in 0..=i {
                let v = kernel.autocovariance(ti, grid.node(j + 1)?)?;
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }

        // Refinement covariance R = Sigma - Abar D Abar^T (PSD by the law of
        // total variance; jitter only mops up rounding).
        let mut refine_cov = sigma.clone();
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in 0..=j.min(i) {
                    acc += loading[(i, k)] * loading[(j, k)] * dts[k];
                }
                refine_cov[(i, j)] -= acc;
                if i != j {
                    refine_cov[(j, i)] = refine_cov[(i, j)];
                }
            }
        }

        let sigma_max = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| sigma[(i, j)].abs())
            .fold(0.0_f64, f64::max);
        let refine_max = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| refine_cov[(i, j)].abs())
            .fold(0.0_f64, f64::max);

        if refine_max <= TRIVIAL_REFINEMENT * (1.0 + sigma_max) {
            // Brownian-reducible kernel: the node values are a deterministic
            // function of the increments.
            return Ok(NoiseModel {
                n,
                dts,
                loading,
                refine: DMatrix::zeros(n, n),
                trivial_refinement: true,
                residual: refine_max,
            });
        }

        let mut jitter = 0.0_f64;
        loop {
            let mut attempt = refine_cov.clone();
            for i in 0..n {
                attempt[(i, i)] += jitter;
            }
            if let Some(chol) = attempt.cholesky() {
                let m = chol.unpack();
                let reconstructed = &m * m.transpose();
                let mut residual = 0.0_f64;
                for i in 0..n {
                    for j in 0..n {
                        residual =
                            residual.max((reconstructed[(i, j)] - refine_cov[(i, j)]).abs());
                    }
                }
                if residual > MAX_FACTOR_RESIDUAL {
                    return Err(Error::FactorizationFailure(format!(
                        "factorization residual {residual:.3e} exceeds {MAX_FACTOR_RESIDUAL:.1e}"
                    )));
                }
                return Ok(NoiseModel {
                    n,
                    dts,
                    loading,
                    refine: m,
                    trivial_refinement: false,
                    residual,
                });
            }
            jitter = if jitter == 0.0 { 1e-14 } else { jitter * 10.0 };
            if jitter > MAX_JITTER {
                return Err(Error::FactorizationFailure(format!(
                    "refinement covariance not positive semidefinite after jitter up to {MAX_JITTER:.1e}"
                )));
            }
        }
    }

    /// Increment loading `Abar(node, cell)`; zero above the diagonal.
    #[inline]
    pub(crate) fn loading_at(&self, node: usize, cell: usize) -> f64 {
        debug_assert!(node >= 1 && node <= self.n);
        self.loading[(node - 1, cell)]
    }

    /// Refinement loading `M(node, xi_{cell+1})`; zero above the diagonal.
    #[inline]
    pub(crate) fn refine_at(&self, node: usize, cell: usize) -> f64 {
        debug_assert!(node >= 1 && node <= self.n);
        self.refine[(node - 1, cell)]
    }

    /// Step sizes of the grid the model was built on.
    #[cfg(test)]
    pub(crate) fn dts(&self) -> &[f64] {
        &self.dts
    }

    #[cfg(test)]
    pub(crate) fn residual(&self) -> f64 {
        self.residual
    }
}

/// An ensemble of simulated paths on the sub-grid `[t_anchor, T]`.
///
/// Matrices are `n_paths x (local nodes)` for states and
/// `n_paths x (local steps)` for noises; local column `j` corresponds to
/// absolute node `anchor + j`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    /// Full grid the ensemble lives on.
    pub grid: TimeGrid,
    /// First covered node (0 for unconditional ensembles).
    pub anchor: usize,
    /// Kernel used for the draw (needed to rebuild forward curves).
    pub kernel: Kernel,
    /// Mean curve of the draw (omega at anchor 0, Theta later).
    pub base_curve: ForwardCurve,
    /// Seed of the simulation.
    pub seed: u64,
    /// `max |Abar D Abar^T + M M^T - Sigma|` of the noise-model assembly
    /// (0 when the kernel carries no noise).
    pub factorization_residual: f64,
    model: Arc<NoiseModel>,
    v: Array2<f64>,
    x: Array2<f64>,
    dw: Array2<f64>,
    db: Array2<f64>,
    xi: Array2<f64>,
    truncation_count: u64,
}

impl PathEnsemble {
    /// Number of simulated paths.
    pub fn n_paths(&self) -> usize {
        self.v.nrows()
    }

    /// Number of covered nodes (columns of the state matrices).
    pub fn n_local_nodes(&self) -> usize {
        self.v.ncols()
    }

    /// Number of covered steps (columns of the noise matrices).
    pub fn n_local_steps(&self) -> usize {
        self.dw.ncols()
    }

    /// Variance paths.
    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    /// Log-price paths.
    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    /// W increments.
    pub fn dw(&self) -> &Array2<f64> {
        &self.dw
    }

    /// B increments.
    pub fn db(&self) -> &Array2<f64> {
        &self.db
    }

    /// Refinement noises (standard normal per cell; see the module docs).
    pub fn xi(&self) -> &Array2<f64> {
        &self.xi
    }

    /// The full-grid noise model the draw was generated from.
    pub(crate) fn noise_model(&self) -> &NoiseModel {
        &self.model
    }

    /// Local column for an absolute node index.
    pub fn local_index(&self, node: usize) -> Result<usize> {
        if node < self.anchor || node > self.grid.n_steps() {
            return Err(Error::Index(format!(
                "node {node} outside ensemble range {}..={}",
                self.anchor,
                self.grid.n_steps()
            )));
        }
        Ok(node - self.anchor)
    }

    /// Fraction of (path, chi-evaluation node) pairs with a negative
    /// variance value, i.e. how often the truncation in chi was active.
    pub fn truncation_frequency(&self) -> f64 {
        let cells = (self.n_paths() * self.n_local_steps()) as f64;
        if cells == 0.0 {
            0.0
        } else {
            self.truncation_count as f64 / cells
        }
    }
}

/// Exact-law draw of the variance factor together with the underlying cell
/// increments (see the module docs for the construction).
pub struct VarianceDraw {
    /// `n_paths x (n_steps + 1)` variance paths (column 0 is `omega_0`).
    pub v: Array2<f64>,
    /// `n_paths x n_steps` driving increments, iid `N(0, dt)`.
    pub dw: Array2<f64>,
    /// `n_paths x n_steps` refinement noises (standard normal).
    pub xi: Array2<f64>,
    /// `max |Abar D Abar^T + M M^T - Sigma|` of the noise-model assembly.
    pub factorization_residual: f64,
}

/// Per-path raw draw on a sub-grid: increments for both drivers plus the
/// refinement noises.
pub(crate) struct RawDraw {
    pub dw: Vec<f64>,
    pub xi: Vec<f64>,
    pub db: Vec<f64>,
}

/// Sampler view of a noise model anchored at a grid node: draws fresh noises
/// and folds variance paths on `[t_anchor, T]`.
pub(crate) struct ConditionalSampler {
    model: Arc<NoiseModel>,
    anchor: usize,
}

impl ConditionalSampler {
    pub(crate) fn new(kernel: Kernel, grid: &TimeGrid, anchor: usize) -> Result<Self> {
        if anchor > grid.n_steps() {
            return Err(Error::Index(format!(
                "anchor {anchor} beyond grid with {} steps",
                grid.n_steps()
            )));
        }
        let model = Arc::new(NoiseModel::build(&kernel, grid)?);
        Ok(ConditionalSampler { model, anchor })
    }

    /// Number of covered steps.
    pub(crate) fn m(&self) -> usize {
        self.model.n - self.anchor
    }

    /// Step sizes on the covered sub-grid.
    pub(crate) fn dts(&self) -> &[f64] {
        &self.model.dts[self.anchor..]
    }

    pub(crate) fn model(&self) -> &Arc<NoiseModel> {
        &self.model
    }

    pub(crate) fn factorization_residual(&self) -> f64 {
        self.model.residual
    }

    /// Draw the noises of one path: `m` increments for W (iid `N(0, dt)`),
    /// `m` refinement normals, then `m` increments for B.
    pub(crate) fn draw(&self, sim_seed: u64, path: u64) -> RawDraw {
        let m = self.m();
        let dts = self.dts();
        let mut rng = path_rng(sim_seed, path);
        let dw: Vec<f64> = (0..m)
            .map(|k| rng.sample::<f64, _>(StandardNormal) * dts[k].sqrt())
            .collect();
        let xi: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let db: Vec<f64> = (0..m)
            .map(|k| rng.sample::<f64, _>(StandardNormal) * dts[k].sqrt())
            .collect();
        RawDraw { dw, xi, db }
    }

    /// Variance path as the ascending fold from the curve values,
    ///
    /// ```text
    /// V_{a+j} = curve_j + sum_{k<j} (Abar[a+j, a+k] dw_k + M[a+j, a+k] xi_k),
    /// ```
    ///
    /// accumulated cell by cell (loading term then refinement term) so every
    /// prefix of the sum is bitwise a [`theta_curve`] value and restarts
    /// reproduce paths exactly.
    pub(crate) fn v_row(&self, curve: &[f64], dw: &[f64], xi: &[f64]) -> Vec<f64> {
        let m = self.m();
        let a = self.anchor;
        let model = &*self.model;
        let mut v = vec![0.0; m + 1];
        v[0] = curve[0];
        for j in 1..=m {
            let node = a + j;
            let mut acc = curve[j];
            if model.trivial_refinement {
                for k in 0..j {
                    acc += model.loading_at(node, a + k) * dw[k];
                }
            } else {
                for k in 0..j {
                    acc += model.loading_at(node, a + k) * dw[k];
                    acc += model.refine_at(node, a + k) * xi[k];
                }
            }
            v[j] = acc;
        }
        v
    }
}

/// One step of the log-price scheme. Kept as the single source of truth so
/// restarted paths reproduce original ones bitwise.
#[inline]
fn x_step(params: &ModelParams, x: f64, v_left: f64, dt: f64, dw: f64, db: f64) -> f64 {
    let chi = params.chi.eval(v_left);
    x - 0.5 * chi * chi * dt + chi * (params.rho * dw + params.rho_bar * db)
}

/// Full log-price path from `x_start` given variance values and increments.
fn x_row(params: &ModelParams, dts: &[f64], v: &[f64], dw: &[f64], db: &[f64], x_start: f64) -> Vec<f64> {
    let m = dts.len();
    let mut x = vec![0.0; m + 1];
    x[0] = x_start;
    for k in 0..m {
        x[k + 1] = x_step(params, x[k], v[k], dts[k], dw[k], db[k]);
    }
    x
}

/// Terminal log-price only (same arithmetic as [`x_row`]).
pub(crate) fn x_terminal(
    params: &ModelParams,
    dts: &[f64],
    v: &[f64],
    dw: &[f64],
    db: &[f64],
    x_start: f64,
) -> f64 {
    let mut x = x_start;
    for k in 0..dts.len() {
        x = x_step(params, x, v[k], dts[k], dw[k], db[k]);
    }
    x
}

fn validate_paths_seedable(n_paths: usize) -> Result<()> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    Ok(())
}

/// Simulate the conditional system on `[t_{t_index}, T]` from state
/// `(curve, x)` with fresh noises.
pub fn conditional_forward(
    params: &ModelParams,
    grid: &TimeGrid,
    t_index: usize,
    curve: &ForwardCurve,
    x: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    validate_paths_seedable(n_paths)?;
    if curve.anchor() != t_index {
        return Err(Error::InvalidParameter(format!(
            "curve anchored at {} but simulation starts at node {t_index}",
            curve.anchor()
        )));
    }
    let n = grid.n_steps();
    if t_index > n {
        return Err(Error::Index(format!(
            "start node {t_index} beyond grid with {n} steps"
        )));
    }
    if curve.len() != n - t_index + 1 {
        return Err(Error::InvalidParameter(format!(
            "curve covers {} nodes, expected {}",
            curve.len(),
            n - t_index + 1
        )));
    }
    if !x.is_finite() {
        return Err(Error::InvalidParameter(format!("x must be finite, got {x}")));
    }

    let sampler = ConditionalSampler::new(params.kernel, grid, t_index)?;
    let m = sampler.m();
    let curve_values = curve.values().to_vec();
    let dts = sampler.dts().to_vec();

    struct Row {
        v: Vec<f64>,
        x: Vec<f64>,
        dw: Vec<f64>,
        db: Vec<f64>,
        xi: Vec<f64>,
        truncated: u64,
    }

    let rows: Vec<Row> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let raw = sampler.draw(seed, p as u64);
            let v = sampler.v_row(&curve_values, &raw.dw, &raw.xi);
            let x_path = x_row(params, &dts, &v, &raw.dw, &raw.db, x);
            let truncated = v[..m].iter().filter(|&&vv| vv < 0.0).count() as u64;
            Row {
                v,
                x: x_path,
                dw: raw.dw,
                db: raw.db,
                xi: raw.xi,
                truncated,
            }
        })
        .collect();

    let mut v = Array2::zeros((n_paths, m + 1));
    let mut x_m = Array2::zeros((n_paths, m + 1));
    let mut dw = Array2::zeros((n_paths, m));
    let mut db = Array2::zeros((n_paths, m));
    let mut xi = Array2::zeros((n_paths, m));
    let mut truncation_count = 0;
    for (p, row) in rows.into_iter().enumerate() {
        for j in 0..=m {
            v[[p, j]] = row.v[j];
            x_m[[p, j]] = row.x[j];
        }
        for k in 0..m {
            dw[[p, k]] = row.dw[k];
            db[[p, k]] = row.db[k];
            xi[[p, k]] = row.xi[k];
        }
        truncation_count += row.truncated;
    }

    Ok(PathEnsemble {
        grid: grid.clone(),
        anchor: t_index,
        kernel: params.kernel,
        base_curve: curve.clone(),
        seed,
        factorization_residual: sampler.factorization_residual(),
        model: sampler.model().clone(),
        v,
        x: x_m,
        dw,
        db,
        xi,
        truncation_count,
    })
}

/// Simulate the unconditional system from `(omega = flat v0, x0)` on the full
/// grid.
pub fn simulate_joint(
    params: &ModelParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let omega = ForwardCurve::flat(grid, 0, params.v0)?;
    conditional_forward(params, grid, 0, &omega, params.x0, n_paths, seed)
}

/// Simulate the unconditional system from an optional tabulated initial
/// curve anchored at node 0 (`None` = the flat curve at `params.v0`).
pub fn unconditional_ensemble(
    params: &ModelParams,
    grid: &TimeGrid,
    curve: Option<&ForwardCurve>,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    match curve {
        Some(c) => conditional_forward(params, grid, 0, c, params.x0, n_paths, seed),
        None => simulate_joint(params, grid, n_paths, seed),
    }
}

/// Draw the variance factor and its underlying increments only.
///
/// This is the same draw as [`simulate_joint`] (identical seed mapping), with
/// the price component discarded.
pub fn simulate_volterra_variance(
    params: &ModelParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<VarianceDraw> {
    let ens = simulate_joint(params, grid, n_paths, seed)?;
    Ok(VarianceDraw {
        v: ens.v,
        dw: ens.dw,
        xi: ens.xi,
        factorization_residual: ens.factorization_residual,
    })
}

/// The forward variance curve of one path at node `t_index`:
///
/// ```text
/// Theta_j = base_j + sum_{k < t_index} (Abar[j,k] dW_k + M[j,k] xi_k)
/// ```
///
/// for `j >= t_index`, accumulated in the same ascending order as the
/// simulation so prefixes match the stored variance bitwise (in particular
/// `Theta_t = V_t`).
pub fn theta_curve(ensemble: &PathEnsemble, path_index: usize, t_index: usize) -> Result<ForwardCurve> {
    if path_index >= ensemble.n_paths() {
        return Err(Error::Index(format!(
            "path {path_index} in an ensemble of {}",
            ensemble.n_paths()
        )));
    }
    let local_t = ensemble.local_index(t_index)?;
    let n = ensemble.grid.n_steps();
    let a = ensemble.anchor;
    let model = ensemble.noise_model();
    let mut values = Vec::with_capacity(n - t_index + 1);
    for node in t_index..=n {
        let local_node = node - a;
        let mut acc = ensemble.base_curve.value_at(node)?;
        if model.trivial_refinement {
            for k in 0..local_t.min(local_node) {
                acc += model.loading_at(node, a + k) * ensemble.dw[[path_index, k]];
            }
        } else {
            for k in 0..local_t.min(local_node) {
                acc += model.loading_at(node, a + k) * ensemble.dw[[path_index, k]];
                acc += model.refine_at(node, a + k) * ensemble.xi[[path_index, k]];
            }
        }
        values.push(acc);
    }
    ForwardCurve::new(t_index, values)
}

/// Deterministically replay a path segment: starting at `(t_index, curve, x)`
/// apply the given future noises through the same arithmetic as the
/// simulation. Returns `(v, x)` over nodes `t_index..=n`.
pub fn resimulate_with_increments(
    params: &ModelParams,
    grid: &TimeGrid,
    t_index: usize,
    curve: &ForwardCurve,
    x: f64,
    dw_future: &[f64],
    db_future: &[f64],
    xi_future: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = grid.n_steps();
    if t_index > n {
        return Err(Error::Index(format!(
            "start node {t_index} beyond grid with {n} steps"
        )));
    }
    let m = n - t_index;
    if curve.anchor() != t_index || curve.len() != m + 1 {
        return Err(Error::InvalidParameter(
            "curve must be anchored at t_index and cover the remaining nodes".into(),
        ));
    }
    if dw_future.len() != m || db_future.len() != m || xi_future.len() != m {
        return Err(Error::InvalidParameter(format!(
            "need {m} future noises, got {} dW, {} dB and {} xi",
            dw_future.len(),
            db_future.len(),
            xi_future.len()
        )));
    }
    let sampler = ConditionalSampler::new(params.kernel, grid, t_index)?;
    let v = sampler.v_row(curve.values(), dw_future, xi_future);
    let x_path = x_row(params, sampler.dts(), &v, dw_future, db_future, x);
    Ok((v, x_path))
}
