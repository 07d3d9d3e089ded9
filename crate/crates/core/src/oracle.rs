//! Closed-form reference laws for the scalar model
//! dX = (-X + Y) dt + dW driven by the unit Ornstein-Uhlenbeck process.
//!
//! Every law of this model is Gaussian with explicit moments, so it anchors
//! the Monte Carlo machinery: kernel moments, the pullback limit measure,
//! and total-variation distances between kernels all have closed forms here.

use std::sync::Arc;

use crate::driving::{DrivingPath, OuSpec};
use crate::error::CoreError;
use crate::integrator::SemilinearModel;
use crate::measures::gaussian_tv_equal_cov;

/// The reference model in Galerkin coordinates: A = -1, b = 0, g(x,y) = y,
/// sigma = 1. Growth bound h(r) = 1 + r.
pub fn example1d_model() -> SemilinearModel {
    SemilinearModel::new(
        vec![-1.0],
        Arc::new(|_x: &[f64]| vec![0.0]),
        Arc::new(|_x: &[f64], y: &[f64]| vec![y[0]]),
        Arc::new(|_x: &[f64], _y: &[f64]| vec![1.0]),
    )
    .expect("valid model")
    .with_growth(1.0)
}

/// The driver the closed forms assume: drift -1, scale 1, stationary
/// variance 1/2.
pub fn example1d_driver() -> OuSpec {
    OuSpec::unit()
}

/// Moments of the pullback-limit measure at one time.
#[derive(Debug, Clone, Copy)]
pub struct EvoMoments {
    pub mean: f64,
    pub var: f64,
    /// Bound on the error from truncating the past window:
    /// e^{-t_hist} sup |Y|.
    pub truncation_bound: f64,
}

/// Closed-form evaluator bound to one frozen driving realization.
/// Quadrature is the trapezoid rule on the driving grid.
#[derive(Debug, Clone, Copy)]
pub struct Oracle<'a> {
    driving: &'a DrivingPath,
}

impl<'a> Oracle<'a> {
    pub fn new(driving: &'a DrivingPath) -> Self {
        let spec = &driving.spec;
        assert!(
            spec.dim == 1
                && (spec.drift_eigs[0] + 1.0).abs() < 1e-12
                && (spec.noise_scale[0] - 1.0).abs() < 1e-12
                || spec.noise_scale[0] == 0.0 && (spec.drift_eigs[0] + 1.0).abs() < 1e-12,
            "oracle requires the unit driver (drift -1, scale 1 or 0)"
        );
        Oracle { driving }
    }

    /// Trapezoid quadrature of int_a^b e^{-(t_ref - r)} Y(r) dr on the
    /// driving grid; a and b must be grid-aligned and covered.
    fn convolution(&self, a: f64, b: f64, t_ref: f64) -> f64 {
        let dt = self.driving.dt();
        let n = ((b - a) / dt).round() as usize;
        let mut acc = 0.0;
        for j in 0..=n {
            let r = a + j as f64 * dt;
            let w = if j == 0 || j == n { 0.5 } else { 1.0 };
            acc += w * (-(t_ref - r)).exp() * self.driving.value_at(r + 0.25 * dt)[0];
        }
        acc * dt
    }

    /// Exact conditional law of X(t, s, x): Gaussian with
    /// mean e^{-(t-s)} x + int_s^t e^{-(t-r)} Y(r) dr and
    /// variance (1 - e^{-2(t-s)})/2.
    pub fn exact_kernel(&self, x: f64, s: f64, t: f64) -> Result<(f64, f64), CoreError> {
        if t < s {
            return Err(CoreError::invalid("t", "needs t >= s"));
        }
        self.driving.check_covers(s, t)?;
        let mean = (-(t - s)).exp() * x + self.convolution(s, t, t);
        let var = (1.0 - (-2.0 * (t - s)).exp()) / 2.0;
        Ok((mean, var))
    }

    /// Pullback-limit measure at time t: N(int e^{theta} Y(t+theta) dtheta, 1/2),
    /// integrated over the available past window.
    pub fn exact_evo_measure(&self, t: f64) -> Result<EvoMoments, CoreError> {
        self.driving.check_covers(t, t)?;
        let lo = self.driving.t_min();
        if t - lo < self.driving.dt() {
            return Err(CoreError::Coverage {
                cover_lo: lo,
                cover_hi: self.driving.t_origin,
                want_lo: lo - 1.0,
                want_hi: t,
            });
        }
        let mean = self.convolution(lo, t, t);
        let truncation_bound = (-(t - lo)).exp() * self.driving.sup_norm();
        Ok(EvoMoments {
            mean,
            var: 0.5,
            truncation_bound,
        })
    }

    /// Closed-form total variation between the kernels started at x and y:
    /// means differ by e^{-(t-s)}(x - y) regardless of the driving path, and
    /// the variances agree.
    pub fn exact_tv_kernels(&self, x: f64, y: f64, s: f64, t: f64) -> f64 {
        assert!(t > s, "needs t > s");
        let delta = (-(t - s)).exp() * (x - y);
        let sd = ((1.0 - (-2.0 * (t - s)).exp()) / 2.0).sqrt();
        gaussian_tv_equal_cov(&[0.0], &[delta], &[sd])
    }
}

/// Variance of the truncated pullback mean int_{-T}^0 e^{theta} Y(t+theta)
/// dtheta over driving realizations of the unit driver:
/// (1 - e^{-2T})/4 - T e^{-2T}/2. Tends to 1/4 as T grows.
pub fn evo_mean_variance(t_hist: f64) -> f64 {
    (1.0 - (-2.0 * t_hist).exp()) / 4.0 - t_hist * (-2.0 * t_hist).exp() / 2.0
}
