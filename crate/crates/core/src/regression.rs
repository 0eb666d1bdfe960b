//! Cross-sectional least squares used by the regression Monte Carlo solver.
//!
//! One [`DesignFactor`] is built per time step and reused for the three
//! regression targets (continuation value and the two martingale
//! integrands). The pipeline is
//!
//! 1. prepend an intercept and standardize the feature columns,
//! 2. drop zero-variance columns and columns that are numerically in the
//!    span of earlier ones (modified Gram-Schmidt screen) — the default
//!    polynomial basis is structurally collinear at deterministic nodes,
//! 3. eigen-factorize the normal equations and fail with
//!    [`Error::SingularRegression`] if the condition number still exceeds
//!    the caller's limit,
//! 4. fit targets through the factorization; fitted values come with
//!    heteroskedasticity-robust (sandwich) prediction standard errors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative residual-norm threshold below which a column is treated as
/// linearly dependent on earlier ones.
const DEPENDENCE_TOL: f64 = 1e-8;

/// Relative standard-deviation threshold below which a column is constant.
const CONSTANT_TOL: f64 = 1e-12;

/// Result of one least-squares fit.
#[derive(Debug, Clone)]
pub(crate) struct FitResult {
    /// Fitted conditional mean at every sample point.
    pub fitted: Vec<f64>,
    /// Sandwich-estimator standard error of each fitted value.
    pub pred_se: Vec<f64>,
    /// In-sample coefficient of determination.
    pub r_squared: f64,
}

/// A factorized regression design, reusable across targets.
#[derive(Debug)]
pub(crate) struct DesignFactor {
    /// Standardized kept columns, intercept first (n x p).
    phi: DMatrix<f64>,
    /// Eigenvectors of `phi^T phi` (p x p).
    q: DMatrix<f64>,
    /// Reciprocal eigenvalues.
    inv_lambda: DVector<f64>,
    /// `phi * q`, cached for prediction-variance evaluation (n x p).
    psi: DMatrix<f64>,
    /// Condition number of the normal equations.
    condition: f64,
}

impl DesignFactor {
    /// Build from raw feature columns (without intercept).
    ///
    /// `condition_limit` bounds the eigenvalue ratio of the normal equations
    /// after screening; beyond it the design is reported singular.
    pub(crate) fn new(features: &DMatrix<f64>, condition_limit: f64) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "regression needs at least 2 observations, got {n}"
            )));
        }

        // Standardize; the intercept is column 0 of the kept set.
        let mut columns: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
        for j in 0..features.ncols() {
            let col = features.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            let sd = var.sqrt();
            if !sd.is_finite() {
                return Err(Error::Domain(format!(
                    "feature column {j} is not finite"
                )));
            }
            if sd <= CONSTANT_TOL * (1.0 + mean.abs()) {
                continue; // constant column: the intercept already covers it
            }
            columns.push(col.map(|v| (v - mean) / sd));
        }

        // Modified Gram-Schmidt screen for near-dependence.
        let sqrt_n = (n as f64).sqrt();
        let mut kept: Vec<DVector<f64>> = Vec::with_capacity(columns.len());
        let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(columns.len());
        for col in columns {
            let mut r = col.clone() / sqrt_n; // unit-ish norm
            for q in &ortho {
                let proj = q.dot(&r);
                r.axpy(-proj, q, 1.0);
            }
            let norm = r.norm();
            if norm < DEPENDENCE_TOL {
                continue; // numerically in the span of earlier columns
            }
            ortho.push(r / norm);
            kept.push(col);
        }

        let p = kept.len();
        let phi = DMatrix::from_columns(&kept);
        let gram = phi.transpose() * &phi;
        let eigen = gram.symmetric_eigen();
        let lambda_max = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let lambda_min = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        let condition = if lambda_min > 0.0 {
            lambda_max / lambda_min
        } else {
            f64::INFINITY
        };
        if !(condition <= condition_limit) {
            return Err(Error::SingularRegression {
                condition,
                limit: condition_limit,
            });
        }
        let inv_lambda = DVector::from_iterator(p, eigen.eigenvalues.iter().map(|l| 1.0 / l));
        let psi = &phi * &eigen.eigenvectors;
        Ok(DesignFactor {
            phi,
            q: eigen.eigenvectors,
            inv_lambda,
            psi,
            condition,
        })
    }

    /// Condition number of the screened normal equations.
    pub(crate) fn condition(&self) -> f64 {
        self.condition
    }

    /// Number of retained columns (including the intercept).
    pub(crate) fn rank(&self) -> usize {
        self.phi.ncols()
    }

    /// Least-squares fit of `y` on the factorized design.
    pub(crate) fn fit(&self, y: &[f64]) -> FitResult {
        let n = self.phi.nrows();
        assert_eq!(y.len(), n, "target length must match the design");
        let yv = DVector::from_column_slice(y);

        // beta in the eigenbasis: Lambda^{-1} Q^T Phi^T y = Lambda^{-1} Psi^T y.
        let mut beta_eig = self.psi.transpose() * &yv;
        beta_eig.component_mul_assign(&self.inv_lambda);
        let fitted_v = &self.psi * &beta_eig;

        let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted_v[i]).collect();

        // Sandwich prediction variance: with S = Phi^T diag(e^2) Phi,
        // Var(fit_i) = psi_i Lambda^{-1} (Q^T S Q) Lambda^{-1} psi_i^T.
        let p = self.phi.ncols();
        let mut s = DMatrix::zeros(p, p);
        for i in 0..n {
            let e2 = residuals[i] * residuals[i];
            if e2 == 0.0 {
                continue;
            }
            let row = self.phi.row(i);
            for a in 0..p {
                let ra = row[a] * e2;
                for b in a..p {
                    s[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                s[(a, b)] = s[(b, a)];
            }
        }
        let mut w = self.q.transpose() * s * &self.q;
        for a in 0..p {
            for b in 0..p {
                w[(a, b)] *= self.inv_lambda[a] * self.inv_lambda[b];
            }
        }

        let mut pred_se = vec![0.0; n];
        for i in 0..n {
            let psi_i = self.psi.row(i);
            let mut var = 0.0;
            for a in 0..p {
                let mut acc = 0.0;
                for b in 0..p {
                    acc += w[(a, b)] * psi_i[b];
                }
                var += psi_i[a] * acc;
            }
            pred_se[i] = var.max(0.0).sqrt();
        }

        let y_mean = y.iter().sum::<f64>() / n as f64;
        let sst: f64 = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
        let ssr: f64 = residuals.iter().map(|e| e * e).sum();
        let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };

        FitResult {
            fitted: fitted_v.iter().copied().collect(),
            pred_se,
            r_squared,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const LIMIT: f64 = 1e12;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn exact_linear_function_is_recovered() {
        let n = 500;
        let a = noise(n, 1);
        let b = noise(n, 2);
        let mut features = DMatrix::zeros(n, 2);
        for i in 0..n {
            features[(i, 0)] = a[i];
            features[(i, 1)] = b[i];
        }
        let y: Vec<f64> = (0..n).map(|i| 2.0 + 3.0 * a[i] - b[i]).collect();
        let factor = DesignFactor::new(&features, LIMIT).unwrap();
        assert_eq!(factor.rank(), 3);
        let fit = factor.fit(&y);
        for i in 0..n {
            assert!((fit.fitted[i] - y[i]).abs() < 1e-9);
            assert!(fit.pred_se[i] < 1e-9);
        }
        assert!(fit.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn doubling_the_target_doubles_the_fit_bitwise() {
        // Every operation in the solve path scales exactly under
        // multiplication by 2, so this must hold to the last bit.
        let n = 300;
        let a = noise(n, 3);
        let mut features = DMatrix::zeros(n, 1);
        for i in 0..n {
            features[(i, 0)] = a[i];
        }
        let y = noise(n, 4);
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let factor = DesignFactor::new(&features, LIMIT).unwrap();
        let f1 = factor.fit(&y);
        let f2 = factor.fit(&y2);
        for i in 0..n {
            assert_eq!(f2.fitted[i].to_bits(), (2.0 * f1.fitted[i]).to_bits());
        }
    }

    #[test]
    fn duplicate_and_constant_columns_are_screened() {
        let n = 200;
        let a = noise(n, 5);
        let mut features = DMatrix::zeros(n, 3);
        for i in 0..n {
            features[(i, 0)] = a[i];
            features[(i, 1)] = 5.0; // constant: dropped against intercept
            features[(i, 2)] = -2.0 * a[i]; // exact linear combination
        }
        let factor = DesignFactor::new(&features, LIMIT).unwrap();
        assert_eq!(factor.rank(), 2, "intercept + one informative column");

        // Fit agrees with the fit on the informative column alone.
        let y: Vec<f64> = (0..n).map(|i| 1.0 + a[i]).collect();
        let full = factor.fit(&y);
        let mut single = DMatrix::zeros(n, 1);
        for i in 0..n {
            single[(i, 0)] = a[i];
        }
        let reduced = DesignFactor::new(&single, LIMIT).unwrap().fit(&y);
        for i in 0..n {
            assert!((full.fitted[i] - reduced.fitted[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn near_dependence_beyond_screen_reports_singularity() {
        // A column at relative distance 1e-7 from the span passes the 1e-8
        // screen but pushes the condition number past the limit.
        let n = 400;
        let a = noise(n, 6);
        let eps = noise(n, 7);
        let mut features = DMatrix::zeros(n, 2);
        for i in 0..n {
            features[(i, 0)] = a[i];
            features[(i, 1)] = a[i] + 1e-7 * eps[i];
        }
        match DesignFactor::new(&features, LIMIT) {
            Err(Error::SingularRegression { condition, limit }) => {
                assert!(condition > limit);
            }
            other => panic!("expected SingularRegression, got {other:?}"),
        }
    }

    #[test]
    fn constant_only_fit_is_the_sample_mean() {
        let n = 128;
        let features = DMatrix::zeros(n, 2); // all columns constant -> dropped
        let y = noise(n, 8);
        let factor = DesignFactor::new(&features, LIMIT).unwrap();
        assert_eq!(factor.rank(), 1);
        let fit = factor.fit(&y);
        let mean = y.iter().sum::<f64>() / n as f64;
        let se_mean = {
            let ssr: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ssr / (n as f64 * n as f64)).sqrt()
        };
        for i in 0..n {
            assert!((fit.fitted[i] - mean).abs() < 1e-12);
            assert!((fit.pred_se[i] - se_mean).abs() < 1e-12);
        }
    }

    #[test]
    fn sandwich_errors_track_heteroskedastic_noise() {
        // y = a + noise whose scale depends on a; the robust prediction SE
        // at the noisy end must exceed the quiet end.
        let n = 20_000;
        let a = noise(n, 9);
        let e = noise(n, 10);
        let mut features = DMatrix::zeros(n, 1);
        let mut y = vec![0.0; n];
        for i in 0..n {
            features[(i, 0)] = a[i];
            let scale = if a[i] > 0.0 { 2.0 } else { 0.1 };
            y[i] = a[i] + scale * e[i];
        }
        let factor = DesignFactor::new(&features, LIMIT).unwrap();
        let fit = factor.fit(&y);
        // Prediction variance of a linear fit grows with |a|; compare
        // symmetric points so only the noise asymmetry matters.
        let (mut hi, mut lo) = (0.0, 0.0);
        let (mut nh, mut nl) = (0, 0);
        for i in 0..n {
            if a[i] > 1.0 && a[i] < 2.0 {
                hi += fit.pred_se[i];
                nh += 1;
            } else if a[i] < -1.0 && a[i] > -2.0 {
                lo += fit.pred_se[i];
                nl += 1;
            }
        }
        let (hi, lo) = (hi / nh as f64, lo / nl as f64);
        // The intercept-variance part is shared between both sides, so the
        // ratio is well below the 20x noise-variance ratio; a classical
        // (homoskedastic) formula would give ~1 at symmetric leverage.
        assert!(
            hi > 1.5 * lo,
            "robust SE should be larger on the noisy side: {hi:.2e} vs {lo:.2e}"
        );
    }
}
