//! Volterra convolution kernels and their autocovariances.
//!
//! Kernels are convolution kernels `K(t, r) = K(t - r)`. The workhorse is the
//! Riemann–Liouville family
//!
//! ```text
//! K(tau) = scale * sqrt(2 hurst) * tau^(hurst - 1/2),
//! ```
//!
//! normalized so that `Var(int_0^t K(t - r) dW_r) = scale^2 * t^(2 hurst)`.
//! For `hurst < 1/2` the kernel diverges at zero lag, which is why every
//! evaluation path below is explicit about the diagonal. `Constant` and
//! `Zero` kernels are kept as degenerate reference points: the constant
//! kernel turns the variance factor into a Brownian motion, the zero kernel
//! freezes it at the initial curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::tanh_sinh_zero_to;

/// Absolute tolerance for off-diagonal autocovariance quadrature.
const QUAD_TOL: f64 = 1e-12;

/// A convolution kernel for the Volterra variance factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    /// `scale * sqrt(2 hurst) * lag^(hurst - 1/2)` with `hurst` in (0, 1).
    RiemannLiouville { hurst: f64, scale: f64 },
    /// `scale` at every lag (Brownian variance factor).
    Constant { scale: f64 },
    /// Identically zero (deterministic variance factor).
    Zero,
}

impl Kernel {
    /// Riemann–Liouville kernel; requires `hurst` in (0, 1) and `scale > 0`.
    pub fn riemann_liouville(hurst: f64, scale: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "hurst must lie in (0, 1), got {hurst}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel scale must be positive and finite, got {scale}"
            )));
        }
        Ok(Kernel::RiemannLiouville { hurst, scale })
    }

    /// Constant kernel; requires `scale > 0`.
    pub fn constant(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel scale must be positive and finite, got {scale}"
            )));
        }
        Ok(Kernel::Constant { scale })
    }

    /// The zero kernel.
    pub const fn zero() -> Self {
        Kernel::Zero
    }

    /// Whether the kernel vanishes identically.
    pub fn is_zero(&self) -> bool {
        matches!(self, Kernel::Zero)
    }

    /// Whether evaluation at zero lag is undefined (RL with hurst < 1/2).
    pub fn singular_at_zero_lag(&self) -> bool {
        matches!(self, Kernel::RiemannLiouville { hurst, .. } if *hurst < 0.5)
    }

    /// Evaluate `K(t, r) = K(t - r)` for `0 <= r <= t` (the diagonal `r = t`
    /// only where the kernel is finite there).
    pub fn eval(&self, t: f64, r: f64) -> Result<f64> {
        if !(r >= 0.0) || !(t >= r) || !t.is_finite() {
            return Err(Error::Domain(format!(
                "kernel evaluation needs 0 <= r <= t, got t = {t}, r = {r}"
            )));
        }
        self.eval_lag(t - r)
    }

    /// Evaluate the kernel at a nonnegative lag.
    pub fn eval_lag(&self, lag: f64) -> Result<f64> {
        if !(lag >= 0.0) || !lag.is_finite() {
            return Err(Error::Domain(format!(
                "kernel lag must be nonnegative and finite, got {lag}"
            )));
        }
        match *self {
            Kernel::RiemannLiouville { hurst, scale } => {
                if lag == 0.0 && hurst < 0.5 {
                    return Err(Error::DiagonalSingularity { hurst });
                }
                Ok(scale * (2.0 * hurst).sqrt() * lag.powf(hurst - 0.5))
            }
            Kernel::Constant { scale } => Ok(scale),
            Kernel::Zero => Ok(0.0),
        }
    }

    /// The shifted kernel `s -> K(s - t)`, the natural bump direction for a
    /// state at time `t`.
    pub fn shifted(&self, t: f64) -> ShiftedKernel {
        ShiftedKernel { base: *self, shift: t }
    }

    /// Cell-averaged kernel weight `(1/(b - a)) * int_a^b K(t - r) dr` for a
    /// cell `[a, b]` with `0 <= a < b <= t`.
    ///
    /// This is the L2-optimal loading of the node value `V_t` on the Brownian
    /// increment over `[a, b]`, and it stays finite even when the cell abuts
    /// `t` and the kernel is singular at zero lag (the singularity is
    /// integrable). Closed form for every kernel variant.
    pub fn cell_average(&self, t: f64, a: f64, b: f64) -> Result<f64> {
        if !(0.0 <= a && a < b && b <= t) || !t.is_finite() {
            return Err(Error::Domain(format!(
                "cell average needs 0 <= a < b <= t, got t = {t}, a = {a}, b = {b}"
            )));
        }
        match *self {
            Kernel::Zero => Ok(0.0),
            Kernel::Constant { scale } => Ok(scale),
            Kernel::RiemannLiouville { hurst, scale } => {
                // int_a^b (t - r)^(hurst - 1/2) dr
                //   = ((t - a)^(hurst + 1/2) - (t - b)^(hurst + 1/2)) / (hurst + 1/2)
                let p = hurst + 0.5;
                let num = (t - a).powf(p) - (t - b).powf(p);
                Ok(scale * (2.0 * hurst).sqrt() * num / (p * (b - a)))
            }
        }
    }

    /// Autocovariance `int_0^min(s,t) K(s - r) K(t - r) dr`.
    ///
    /// Diagonal values use the closed form (`scale^2 * t^(2 hurst)` for
    /// Riemann–Liouville); off-diagonal values are computed by adaptive
    /// quadrature to absolute tolerance 1e-12.
    pub fn autocovariance(&self, s: f64, t: f64) -> Result<f64> {
        if !(s >= 0.0 && t >= 0.0) || !s.is_finite() || !t.is_finite() {
            return Err(Error::Domain(format!(
                "autocovariance needs finite s, t >= 0, got ({s}, {t})"
            )));
        }
        let m = s.min(t);
        match *self {
            Kernel::Zero => Ok(0.0),
            Kernel::Constant { scale } => Ok(scale * scale * m),
            Kernel::RiemannLiouville { hurst, scale } => {
                if m == 0.0 {
                    return Ok(0.0);
                }
                if s == t {
                    return Ok(scale * scale * m.powf(2.0 * hurst));
                }
                self.autocovariance_by_quadrature(s, t)
            }
        }
    }

    /// Quadrature path for the autocovariance, without the closed-form
    /// diagonal shortcut. Exposed to the crate so tests can pit the
    /// quadrature against the closed form on the diagonal.
    pub(crate) fn autocovariance_by_quadrature(&self, s: f64, t: f64) -> Result<f64> {
        let m = s.min(t);
        let delta = (s - t).abs();
        match *self {
            Kernel::Zero => Ok(0.0),
            Kernel::Constant { scale } => Ok(scale * scale * m),
            Kernel::RiemannLiouville { hurst, scale } => {
                if m == 0.0 {
                    return Ok(0.0);
                }
                let a = hurst - 0.5;
                let c = 2.0 * hurst * scale * scale;
                tanh_sinh_zero_to(|u| c * u.powf(a) * (delta + u).powf(a), m, QUAD_TOL)
            }
        }
    }
}

/// A kernel shifted to anchor time `t`: evaluates `s -> K(s - t)` on `s >= t`
/// (strictly `s > t` where the kernel is singular at zero lag).
#[derive(Debug, Clone, Copy)]
pub struct ShiftedKernel {
    base: Kernel,
    shift: f64,
}

impl ShiftedKernel {
    /// Evaluate the shifted kernel at absolute time `s`.
    pub fn eval(&self, s: f64) -> Result<f64> {
        if s < self.shift {
            return Err(Error::Domain(format!(
                "shifted kernel evaluated at s = {s} before its anchor {t}",
                t = self.shift
            )));
        }
        self.base.eval_lag(s - self.shift)
    }

    /// The anchor time of the shift.
    pub fn anchor(&self) -> f64 {
        self.shift
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Frozen oracle values (computed independently before implementation):
    //   sqrt(0.2)  = 0.4472135954999579
    //   sqrt(0.6)  = 0.7745966692414834
    //   2^0.6      = 1.5157165665103982
    const SQRT_02: f64 = 0.447_213_595_499_957_9;
    const SQRT_06: f64 = 0.774_596_669_241_483_4;
    const TWO_POW_06: f64 = 1.515_716_566_510_398_2;

    #[test]
    fn rl_point_values_match_closed_form() {
        let k = Kernel::riemann_liouville(0.1, 1.0).unwrap();
        let v = k.eval(1.0, 0.0).unwrap();
        assert!((v - SQRT_02).abs() < 1e-15, "got {v}");

        // hurst = 1/2 flattens the kernel to the constant `scale`.
        let k = Kernel::riemann_liouville(0.5, 1.0).unwrap();
        assert_eq!(k.eval(3.0, 0.25).unwrap(), 1.0);
        assert_eq!(k.eval(1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn shifted_kernel_evaluates_lagged() {
        let k = Kernel::riemann_liouville(0.3, 1.0).unwrap();
        let shifted = k.shifted(0.5);
        let v = shifted.eval(1.5).unwrap();
        assert!((v - SQRT_06).abs() < 1e-15, "got {v}");
        assert!(shifted.eval(0.25).is_err());
    }

    #[test]
    fn diagonal_singularity_is_signalled() {
        let k = Kernel::riemann_liouville(0.3, 1.0).unwrap();
        assert!(matches!(
            k.eval(1.0, 1.0),
            Err(Error::DiagonalSingularity { .. })
        ));
        // hurst > 1/2 vanishes at zero lag instead of diverging.
        let k = Kernel::riemann_liouville(0.7, 2.0).unwrap();
        assert_eq!(k.eval(1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn domain_violations_are_rejected() {
        let k = Kernel::riemann_liouville(0.3, 1.0).unwrap();
        assert!(k.eval(1.0, 2.0).is_err());
        assert!(k.eval(1.0, -0.5).is_err());
        assert!(k.eval_lag(-1e-12).is_err());
        assert!(Kernel::riemann_liouville(0.0, 1.0).is_err());
        assert!(Kernel::riemann_liouville(1.0, 1.0).is_err());
        assert!(Kernel::riemann_liouville(0.3, 0.0).is_err());
        assert!(Kernel::constant(-1.0).is_err());
    }

    #[test]
    fn autocovariance_diagonal_closed_form() {
        let k = Kernel::riemann_liouville(0.3, 1.0).unwrap();
        let v = k.autocovariance(2.0, 2.0).unwrap();
        assert!((v - TWO_POW_06).abs() < 1e-14, "got {v}");

        let k = Kernel::riemann_liouville(0.3, 0.5).unwrap();
        let v = k.autocovariance(1.0, 1.0).unwrap();
        assert!((v - 0.25).abs() < 1e-14, "got {v}");
    }

    #[test]
    fn quadrature_matches_diagonal_closed_form() {
        // Relative agreement 1e-9 between the quadrature route and the
        // closed form, across the hurst range including both singular and
        // smooth integrands.
        for &h in &[0.1, 0.3, 0.49, 0.5, 0.7, 0.9] {
            let k = Kernel::riemann_liouville(h, 1.0).unwrap();
            for &t in &[0.25_f64, 1.0, 2.0] {
                let exact = t.powf(2.0 * h);
                let quad = k.autocovariance_by_quadrature(t, t).unwrap();
                let rel = ((quad - exact) / exact).abs();
                assert!(rel < 1e-9, "h = {h}, t = {t}: rel err {rel:.3e}");
            }
        }
    }

    #[test]
    fn half_hurst_matches_brownian_covariance() {
        // At hurst = 1/2 the autocovariance is min(s, t), including the
        // quadrature path off the diagonal.
        let k = Kernel::riemann_liouville(0.5, 1.0).unwrap();
        for &(s, t) in &[(0.25, 1.0), (0.5, 0.75), (1.5, 2.0)] {
            let v = k.autocovariance(s, t).unwrap();
            assert!(
                (v - s.min(t)).abs() < 1e-10,
                "({s}, {t}): got {v}, want {}",
                s.min(t)
            );
        }
    }

    #[test]
    fn cell_average_matches_closed_forms() {
        // Constant kernel: the average is the constant.
        let k = Kernel::constant(2.0).unwrap();
        assert_eq!(k.cell_average(1.0, 0.25, 0.5).unwrap(), 2.0);
        // hurst = 1/2: the kernel is the constant `scale`.
        let k = Kernel::riemann_liouville(0.5, 1.7).unwrap();
        assert!((k.cell_average(1.0, 0.5, 1.0).unwrap() - 1.7).abs() < 1e-15);
        // Zero kernel: zero.
        assert_eq!(Kernel::zero().cell_average(1.0, 0.0, 0.5).unwrap(), 0.0);

        // Rough kernel over the full interval [0, t]: the average equals
        // sqrt(2 h) * t^(h - 1/2) / (h + 1/2); at h = 0.3, t = 1 this is
        // sqrt(0.6) / 0.8 (frozen: 0.7745966692414834 / 0.8).
        let k = Kernel::riemann_liouville(0.3, 1.0).unwrap();
        let v = k.cell_average(1.0, 0.0, 1.0).unwrap();
        assert!((v - SQRT_06 / 0.8).abs() < 1e-14, "got {v}");

        // A cell abutting the node is finite even for hurst < 1/2.
        let v = k.cell_average(1.0, 0.75, 1.0).unwrap();
        assert!(v.is_finite() && v > 0.0);

        // Domain checks.
        assert!(k.cell_average(1.0, 0.5, 0.5).is_err());
        assert!(k.cell_average(1.0, 0.5, 1.25).is_err());
        assert!(k.cell_average(1.0, -0.1, 0.5).is_err());
    }

    #[test]
    fn cell_average_matches_quadrature_of_point_kernel() {
        // Independent check: composite Simpson on the de-singularized
        // substitution u = (t - r), w = u^(h + 1/2).
        for &(h, t, a, b) in &[
            (0.3_f64, 1.0_f64, 0.5_f64, 0.75_f64),
            (0.1, 1.0, 0.75, 1.0),
            (0.7, 2.0, 0.0, 0.5),
        ] {
            let k = Kernel::riemann_liouville(h, 1.3).unwrap();
            let got = k.cell_average(t, a, b).unwrap();
            // int_a^b (t-r)^(h-1/2) dr = int_{t-b}^{t-a} u^(h-1/2) du; with
            // w = u^(h+1/2) the integrand becomes 1/(h+1/2) dw exactly, so
            // integrate analytically and only the prefactor is exercised —
            // instead check against a plain midpoint rule on u away from the
            // singular end plus the closed-form tail.
            let p = h + 0.5;
            let lo = t - b;
            let hi = t - a;
            let exact = 1.3 * (2.0 * h).sqrt() * (hi.powf(p) - lo.powf(p)) / (p * (b - a));
            assert!((got - exact).abs() < 1e-14, "h={h}: {got} vs {exact}");

            // Midpoint rule (valid when lo > 0).
            if lo > 0.0 {
                let n = 20_000;
                let step = (hi - lo) / n as f64;
                let mut acc = 0.0;
                for i in 0..n {
                    let u = lo + (i as f64 + 0.5) * step;
                    acc += u.powf(h - 0.5);
                }
                let mid = 1.3 * (2.0 * h).sqrt() * acc * step / (b - a);
                assert!((got - mid).abs() < 1e-8, "h={h}: {got} vs midpoint {mid}");
            }
        }
    }

    #[test]
    fn constant_and_zero_kernels() {
        let k = Kernel::constant(2.0).unwrap();
        assert_eq!(k.eval(1.0, 1.0).unwrap(), 2.0);
        assert_eq!(k.autocovariance(1.0, 3.0).unwrap(), 4.0);
        let z = Kernel::zero();
        assert_eq!(z.eval(5.0, 1.0).unwrap(), 0.0);
        assert_eq!(z.autocovariance(1.0, 2.0).unwrap(), 0.0);
    }

    /// Independent check of the off-diagonal quadrature: substituting
    /// `u = w^(1/(hurst + 1/2))` removes the endpoint singularity, after
    /// which plain composite Simpson converges; the two routes must agree.
    fn simpson_reference(hurst: f64, scale: f64, s: f64, t: f64) -> f64 {
        let m = s.min(t);
        let delta = (s - t).abs();
        let p = 1.0 / (hurst + 0.5);
        let upper = m.powf(hurst + 0.5);
        let g = |w: f64| -> f64 {
            let u = w.powf(p);
            (delta + u).powf(hurst - 0.5)
        };
        let n = 200_000; // even
        let h = upper / n as f64;
        // g(0) is finite for delta > 0, so the endpoints pose no issue.
        let acc = g(0.0) + g(upper);
        let mut sum4 = 0.0;
        let mut sum2 = 0.0;
        for i in 1..n {
            let w = i as f64 * h;
            if i % 2 == 1 {
                sum4 += g(w);
            } else {
                sum2 += g(w);
            }
        }
        let integral_w = (acc + 4.0 * sum4 + 2.0 * sum2) * h / 3.0;
        2.0 * hurst * scale * scale * p * integral_w
    }

    #[test]
    fn off_diagonal_quadrature_matches_independent_rule() {
        for &(h, s, t) in &[(0.3, 0.5, 1.0), (0.1, 0.25, 1.0), (0.7, 1.0, 1.5)] {
            let k = Kernel::riemann_liouville(h, 1.3).unwrap();
            let got = k.autocovariance(s, t).unwrap();
            let want = simpson_reference(h, 1.3, s, t);
            assert!(
                (got - want).abs() < 1e-8,
                "h = {h}, ({s}, {t}): got {got}, want {want}"
            );
        }
    }

    #[test]
    fn autocovariance_positive_semidefinite_on_grids() {
        use nalgebra::DMatrix;
        for &h in &[0.1, 0.3, 0.5, 0.8] {
            let k = Kernel::riemann_liouville(h, 1.0).unwrap();
            let n = 48;
            let nodes: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
            let mut sigma = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = k.autocovariance(nodes[i], nodes[j]).unwrap();
                    sigma[(i, j)] = v;
                    sigma[(j, i)] = v;
                }
            }
            let eig = sigma.symmetric_eigenvalues();
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > -1e-9, "h = {h}: min eigenvalue {min:.3e}");
        }
    }

    proptest! {
        #[test]
        fn autocovariance_is_symmetric(
            h in 0.05f64..0.95,
            s in 0.01f64..2.0,
            t in 0.01f64..2.0,
        ) {
            let k = Kernel::riemann_liouville(h, 1.0).unwrap();
            let a = k.autocovariance(s, t).unwrap();
            let b = k.autocovariance(t, s).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn half_hurst_eval_is_constant(t in 0.0f64..3.0, frac in 0.0f64..1.0) {
            let k = Kernel::riemann_liouville(0.5, 1.7).unwrap();
            let r = t * frac;
            prop_assert_eq!(k.eval(t, r).unwrap(), 1.7);
        }
    }
}
