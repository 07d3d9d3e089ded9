//! 2D Navier-Stokes in vorticity form on the periodic torus, spectrally
//! truncated, as an instance of the abstract semilinear model: A is the
//! (diagonal) Stokes operator, b the advection term evaluated
//! pseudospectrally with two-thirds dealiasing, g injects the smooth driver
//! into the lowest wavenumber shells, and sigma = sqrt(C) is additive
//! diagonal noise.
//!
//! State layout: the retained modes are the integer pairs k != 0 with
//! |k_1|, |k_2| <= kmax = n/3, one representative per conjugate pair, sorted
//! by shell. Each contributes (Re w_k, Im w_k) to the packed real vector, so
//! conjugate symmetry holds by construction. With kmax = n/3 the grid
//! products are alias-free on the retained set: the packed nonlinear term is
//! the exact Galerkin convolution.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::driving::OuSpec;
use crate::error::CoreError;
use crate::integrator::SemilinearModel;
use crate::stats::pairwise_sum;

/// Spectral discretization of the torus: FFT size and retained mode set.
#[derive(Clone)]
pub struct SpectralGrid {
    pub n: usize,
    pub kmax: i32,
    /// One representative (k1, k2) per conjugate pair, shell-sorted.
    pub modes: Vec<(i32, i32)>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralGrid")
            .field("n", &self.n)
            .field("kmax", &self.kmax)
            .field("modes", &self.modes.len())
            .finish()
    }
}

impl SpectralGrid {
    pub fn new(n: usize) -> Result<Self, CoreError> {
        if n < 6 || n % 2 != 0 {
            return Err(CoreError::invalid("n", "need an even grid of at least 6"));
        }
        let kmax = (n / 3) as i32;
        let mut modes = Vec::new();
        for k1 in -kmax..=kmax {
            for k2 in -kmax..=kmax {
                if (k1, k2) == (0, 0) {
                    continue;
                }
                // one representative per conjugate pair
                if k1 > 0 || (k1 == 0 && k2 > 0) {
                    modes.push((k1, k2));
                }
            }
        }
        modes.sort_by_key(|&(k1, k2)| (k1 * k1 + k2 * k2, k1, k2));
        let mut planner = FftPlanner::new();
        Ok(SpectralGrid {
            n,
            kmax,
            modes,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    /// Packed real dimension: (Re, Im) per retained conjugate pair.
    pub fn dim(&self) -> usize {
        2 * self.modes.len()
    }

    pub fn k_squared(&self, m: usize) -> f64 {
        let (k1, k2) = self.modes[m];
        (k1 * k1 + k2 * k2) as f64
    }

    fn flat(&self, k1: i32, k2: i32) -> usize {
        let n = self.n as i32;
        let i1 = k1.rem_euclid(n) as usize;
        let i2 = k2.rem_euclid(n) as usize;
        i2 * self.n + i1
    }

    /// Expands the packed vector to the full conjugate-symmetric field.
    pub fn unpack(&self, packed: &[f64]) -> Vec<Complex<f64>> {
        assert_eq!(packed.len(), self.dim());
        let mut field = vec![Complex::new(0.0, 0.0); self.n * self.n];
        for (m, &(k1, k2)) in self.modes.iter().enumerate() {
            let z = Complex::new(packed[2 * m], packed[2 * m + 1]);
            field[self.flat(k1, k2)] = z;
            field[self.flat(-k1, -k2)] = z.conj();
        }
        field
    }

    /// Reads the retained modes back out of a full field.
    pub fn pack(&self, field: &[Complex<f64>]) -> Vec<f64> {
        let mut packed = vec![0.0; self.dim()];
        for (m, &(k1, k2)) in self.modes.iter().enumerate() {
            let z = field[self.flat(k1, k2)];
            packed[2 * m] = z.re;
            packed[2 * m + 1] = z.im;
        }
        packed
    }

    /// Worst conjugate-symmetry defect of a full field over the retained set.
    pub fn asymmetry(&self, field: &[Complex<f64>]) -> f64 {
        self.modes
            .iter()
            .map(|&(k1, k2)| {
                (field[self.flat(k1, k2)] - field[self.flat(-k1, -k2)].conj()).norm()
            })
            .fold(0.0, f64::max)
    }

    /// In-place 2D FFT (rows then columns). `dir = true` is forward (with
    /// 1/n^2 normalization), false the unnormalized inverse.
    fn fft2(&self, data: &mut [Complex<f64>], forward: bool) {
        let n = self.n;
        let plan = if forward { &self.fwd } else { &self.inv };
        for row in data.chunks_exact_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = data[i * n + j];
            }
            plan.process(&mut col);
            for i in 0..n {
                data[i * n + j] = col[i];
            }
        }
        if forward {
            let scale = 1.0 / (n * n) as f64;
            for z in data.iter_mut() {
                *z *= scale;
            }
        }
    }

    fn to_physical(&self, spectral: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let mut buf = spectral.to_vec();
        self.fft2(&mut buf, false);
        buf
    }
}

/// Squared H-norm (velocity energy): sum over the full plane of
/// |w_k|^2 / |k|^2.
pub fn energy(grid: &SpectralGrid, packed: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..grid.modes.len())
        .map(|m| {
            2.0 * (packed[2 * m] * packed[2 * m] + packed[2 * m + 1] * packed[2 * m + 1])
                / grid.k_squared(m)
        })
        .collect();
    pairwise_sum(&terms)
}

/// Squared V-norm (enstrophy): sum over the full plane of |w_k|^2.
pub fn enstrophy(grid: &SpectralGrid, packed: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..grid.modes.len())
        .map(|m| 2.0 * (packed[2 * m] * packed[2 * m] + packed[2 * m + 1] * packed[2 * m + 1]))
        .collect();
    pairwise_sum(&terms)
}

/// Full-plane real inner product of two packed fields.
pub fn dot_full(a: &[f64], b: &[f64]) -> f64 {
    let terms: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * x * y).collect();
    pairwise_sum(&terms)
}

/// Pseudospectral advection term -(u . grad) w with u recovered from the
/// vorticity by Biot-Savart, dealiased onto the retained set.
pub fn nonlinear_term(grid: &SpectralGrid, packed: &[f64]) -> Vec<f64> {
    let n = grid.n;
    let omega = grid.unpack(packed);
    let mut ux = vec![Complex::new(0.0, 0.0); n * n];
    let mut uy = vec![Complex::new(0.0, 0.0); n * n];
    let mut wx = vec![Complex::new(0.0, 0.0); n * n];
    let mut wy = vec![Complex::new(0.0, 0.0); n * n];
    for &(k1, k2) in &grid.modes {
        for (s1, s2) in [(k1, k2), (-k1, -k2)] {
            let idx = grid.flat(s1, s2);
            let w = omega[idx];
            let ksq = (s1 * s1 + s2 * s2) as f64;
            let i = Complex::new(0.0, 1.0);
            // streamfunction psi = w / |k|^2, u = (d_y psi, -d_x psi)
            ux[idx] = i * (s2 as f64) * w / ksq;
            uy[idx] = -i * (s1 as f64) * w / ksq;
            wx[idx] = i * (s1 as f64) * w;
            wy[idx] = i * (s2 as f64) * w;
        }
    }
    let ux = grid.to_physical(&ux);
    let uy = grid.to_physical(&uy);
    let wx = grid.to_physical(&wx);
    let wy = grid.to_physical(&wy);
    let mut adv: Vec<Complex<f64>> = (0..n * n)
        .map(|j| -(ux[j] * wx[j] + uy[j] * wy[j]))
        .collect();
    grid.fft2(&mut adv, true);
    grid.pack(&adv)
}

/// Conjugate-symmetry defect of the transformed advection field before
/// packing; diagnostic for the reality invariant.
pub fn nonlinear_term_asymmetry(grid: &SpectralGrid, packed: &[f64]) -> f64 {
    let n = grid.n;
    let omega = grid.unpack(packed);
    let mut ux = vec![Complex::new(0.0, 0.0); n * n];
    let mut wx = vec![Complex::new(0.0, 0.0); n * n];
    let mut uy = vec![Complex::new(0.0, 0.0); n * n];
    let mut wy = vec![Complex::new(0.0, 0.0); n * n];
    for &(k1, k2) in &grid.modes {
        for (s1, s2) in [(k1, k2), (-k1, -k2)] {
            let idx = grid.flat(s1, s2);
            let w = omega[idx];
            let ksq = (s1 * s1 + s2 * s2) as f64;
            let i = Complex::new(0.0, 1.0);
            ux[idx] = i * (s2 as f64) * w / ksq;
            uy[idx] = -i * (s1 as f64) * w / ksq;
            wx[idx] = i * (s1 as f64) * w;
            wy[idx] = i * (s2 as f64) * w;
        }
    }
    let ux = grid.to_physical(&ux);
    let uy = grid.to_physical(&uy);
    let wx = grid.to_physical(&wx);
    let wy = grid.to_physical(&wy);
    let mut adv: Vec<Complex<f64>> = (0..n * n)
        .map(|j| -(ux[j] * wx[j] + uy[j] * wy[j]))
        .collect();
    grid.fft2(&mut adv, true);
    grid.asymmetry(&adv)
}

/// One RK4 step of the inviscid unforced truncation dw/dt = N(w); used by
/// the conservation checks.
pub fn inviscid_rk4_step(grid: &SpectralGrid, packed: &[f64], dt: f64) -> Vec<f64> {
    let k1 = nonlinear_term(grid, packed);
    let mut tmp: Vec<f64> = packed.iter().zip(&k1).map(|(x, k)| x + 0.5 * dt * k).collect();
    let k2 = nonlinear_term(grid, &tmp);
    tmp = packed.iter().zip(&k2).map(|(x, k)| x + 0.5 * dt * k).collect();
    let k3 = nonlinear_term(grid, &tmp);
    tmp = packed.iter().zip(&k3).map(|(x, k)| x + dt * k).collect();
    let k4 = nonlinear_term(grid, &tmp);
    packed
        .iter()
        .enumerate()
        .map(|(i, x)| x + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Parameters of the stochastic NS instance.
#[derive(Debug, Clone)]
pub struct NsModelSpec {
    pub viscosity: f64,
    /// Spectral decay of the noise covariance: c_k = c0 |k|^{-alpha}.
    pub alpha: f64,
    /// Target trace of C over the full retained plane; sets c0.
    pub trace_c: f64,
    /// Strength of the low-mode injection g(x, y) = G * y.
    pub coupling_gain: f64,
    /// Number of retained conjugate pairs forced by the driver (shell order).
    pub driving_modes: usize,
}

impl NsModelSpec {
    pub fn validate(&self, grid: &SpectralGrid) -> Result<(), CoreError> {
        if !(self.viscosity > 0.0) {
            return Err(CoreError::invalid("viscosity", "must be positive"));
        }
        if !(self.alpha > 2.0) {
            return Err(CoreError::invalid("alpha", "need alpha > 2 so Tr C stays finite"));
        }
        if !(self.trace_c > 0.0) {
            return Err(CoreError::invalid("trace_c", "must be positive"));
        }
        if self.driving_modes == 0 || self.driving_modes > grid.modes.len() {
            return Err(CoreError::invalid(
                "driving_modes",
                format!("must lie in 1..={}", grid.modes.len()),
            ));
        }
        Ok(())
    }

    /// c0 such that the full-plane trace of C equals `trace_c`.
    pub fn c0(&self, grid: &SpectralGrid) -> f64 {
        let sum: f64 = (0..grid.modes.len())
            .map(|m| grid.k_squared(m).powf(-self.alpha / 2.0))
            .sum();
        self.trace_c / (2.0 * sum)
    }

    /// Velocity-mode noise variance c_k.
    pub fn c_k(&self, grid: &SpectralGrid, m: usize) -> f64 {
        self.c0(grid) * grid.k_squared(m).powf(-self.alpha / 2.0)
    }

    /// Nondegeneracy floor: min over retained modes of c_k |k|^2.
    pub fn nondegeneracy_floor(&self, grid: &SpectralGrid) -> f64 {
        (0..grid.modes.len())
            .map(|m| self.c_k(grid, m) * grid.k_squared(m))
            .fold(f64::INFINITY, f64::min)
    }

    /// Growth constant: h(r) = kappa3 (1 + r) dominates |g| and the
    /// Hilbert-Schmidt norm of sigma.
    pub fn kappa3(&self) -> f64 {
        (std::f64::consts::SQRT_2 * self.coupling_gain).max(self.trace_c.sqrt())
    }

    /// The driver this instance expects: one OU coordinate per forced
    /// real component, drift -1, stationary variance 1/2 each.
    pub fn ou_driver(&self) -> OuSpec {
        let dim = 2 * self.driving_modes;
        OuSpec::new(vec![-1.0; dim], vec![1.0; dim]).expect("valid driver")
    }
}

/// Assembles the packed-coordinate semilinear model: A = -nu |k|^2, b the
/// dealiased advection, g the low-shell velocity injection, sigma the
/// per-mode square root of C carried to vorticity coordinates.
pub fn as_semilinear(spec: &NsModelSpec, grid: &SpectralGrid) -> Result<SemilinearModel, CoreError> {
    spec.validate(grid)?;
    let dim = grid.dim();
    let mut a_eigs = vec![0.0; dim];
    let mut sigma = vec![0.0; dim];
    for m in 0..grid.modes.len() {
        let ksq = grid.k_squared(m);
        a_eigs[2 * m] = -spec.viscosity * ksq;
        a_eigs[2 * m + 1] = -spec.viscosity * ksq;
        // velocity variance c_k split over (Re, Im); vorticity scales by |k|
        let s = ksq.sqrt() * (spec.c_k(grid, m) / 2.0).sqrt();
        sigma[2 * m] = s;
        sigma[2 * m + 1] = s;
    }
    let g = {
        let grid = grid.clone();
        let gain = spec.coupling_gain;
        let forced = spec.driving_modes;
        Arc::new(move |_x: &[f64], y: &[f64]| {
            let mut out = vec![0.0; grid.dim()];
            for m in 0..forced {
                let k = grid.k_squared(m).sqrt();
                out[2 * m] = gain * k * y[2 * m];
                out[2 * m + 1] = gain * k * y[2 * m + 1];
            }
            out
        })
    };
    let b = {
        let grid = grid.clone();
        Arc::new(move |x: &[f64]| nonlinear_term(&grid, x))
    };
    let mut h_weights = vec![0.0; dim];
    for m in 0..grid.modes.len() {
        h_weights[2 * m] = 2.0 / grid.k_squared(m);
        h_weights[2 * m + 1] = 2.0 / grid.k_squared(m);
    }
    SemilinearModel::new(
        a_eigs,
        b,
        g,
        Arc::new(move |_x: &[f64], _y: &[f64]| sigma.clone()),
    )
    .map(|m| m.with_growth(spec.kappa3()).with_h_weights(h_weights))
}

/// Serializes a spectral snapshot as CSV rows (k1, k2, Re, Im), one per
/// retained conjugate pair.
pub fn snapshot_csv(grid: &SpectralGrid, packed: &[f64]) -> String {
    let mut out = String::from("k1,k2,re,im\n");
    for (m, &(k1, k2)) in grid.modes.iter().enumerate() {
        out.push_str(&format!("{k1},{k2},{},{}\n", packed[2 * m], packed[2 * m + 1]));
    }
    out
}

/// Reads a snapshot written by [`snapshot_csv`] back into packed
/// coordinates; rows may come in any order.
pub fn snapshot_from_csv(grid: &SpectralGrid, csv: &str) -> Result<Vec<f64>, CoreError> {
    let mut packed = vec![0.0; grid.dim()];
    let mut seen = 0usize;
    for line in csv.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(CoreError::invalid("snapshot", format!("bad row: {line}")));
        }
        let k1: i32 = cells[0].parse().map_err(|_| CoreError::invalid("snapshot", "bad k1"))?;
        let k2: i32 = cells[1].parse().map_err(|_| CoreError::invalid("snapshot", "bad k2"))?;
        let re: f64 = cells[2].parse().map_err(|_| CoreError::invalid("snapshot", "bad re"))?;
        let im: f64 = cells[3].parse().map_err(|_| CoreError::invalid("snapshot", "bad im"))?;
        let m = grid
            .modes
            .iter()
            .position(|&k| k == (k1, k2))
            .ok_or_else(|| CoreError::invalid("snapshot", format!("unknown mode ({k1},{k2})")))?;
        packed[2 * m] = re;
        packed[2 * m + 1] = im;
        seen += 1;
    }
    if seen != grid.modes.len() {
        return Err(CoreError::invalid(
            "snapshot",
            format!("{seen} rows for {} modes", grid.modes.len()),
        ));
    }
    Ok(packed)
}

/// One recorded path for the energy audit: norms of the state and the
/// growth-bound value of the driver along a trajectory.
#[derive(Debug, Clone)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub h_norm_sq: Vec<f64>,
    pub v_norm_sq: Vec<f64>,
    pub h_of_y_sq: Vec<f64>,
}

/// Energy audit of recorded trajectories against the Ito bound
/// E|X(t)|^2 + nu E int_0^t ||X||^2 <= |x|^2 + int_0^t (E h(|Y|)^2/(nu l1) + Tr C),
/// plus the time-average consequence. The unit-viscosity normal form
/// (coefficient 2 on the forcing integral, no nu) is reported alongside.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EnergyAudit {
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub margin_se: Vec<f64>,
    pub lhs_unit_form: Vec<f64>,
    pub rhs_unit_form: Vec<f64>,
    pub time_avg_lhs: f64,
    pub time_avg_rhs: f64,
    pub pass: bool,
    /// Worst violation in SE units (negative when every margin is safe).
    pub worst_violation_sigmas: f64,
}

pub fn energy_audit(
    traces: &[EnergyTrace],
    x0_h_norm_sq: f64,
    viscosity: f64,
    lambda1: f64,
    trace_c: f64,
) -> EnergyAudit {
    let n_paths = traces.len();
    assert!(n_paths >= 2, "audit needs at least two paths");
    let times = traces[0].times.clone();
    let n_t = times.len();
    let dt_rec = times[1] - times[0];
    let mut lhs = Vec::with_capacity(n_t);
    let mut rhs = Vec::with_capacity(n_t);
    let mut margin_se = Vec::with_capacity(n_t);
    let mut lhs_unit = Vec::with_capacity(n_t);
    let mut rhs_unit = Vec::with_capacity(n_t);
    let mut worst = f64::NEG_INFINITY;
    // per-path running integrals (trapezoid in the recording grid)
    let mut int_v = vec![0.0; n_paths];
    let mut int_h = vec![0.0; n_paths];
    for j in 0..n_t {
        if j > 0 {
            for (p, tr) in traces.iter().enumerate() {
                int_v[p] += 0.5 * dt_rec * (tr.v_norm_sq[j - 1] + tr.v_norm_sq[j]);
                int_h[p] += 0.5 * dt_rec * (tr.h_of_y_sq[j - 1] + tr.h_of_y_sq[j]);
            }
        }
        let per_path_lhs: Vec<f64> = traces
            .iter()
            .enumerate()
            .map(|(p, tr)| tr.h_norm_sq[j] + viscosity * int_v[p])
            .collect();
        let per_path_rhs: Vec<f64> = (0..n_paths)
            .map(|p| x0_h_norm_sq + int_h[p] / (viscosity * lambda1) + trace_c * times[j])
            .collect();
        let margins: Vec<f64> = per_path_rhs
            .iter()
            .zip(&per_path_lhs)
            .map(|(r, l)| r - l)
            .collect();
        let m_mean = crate::stats::mean(&margins);
        let m_se = crate::stats::std_error(&margins).max(1e-300);
        lhs.push(crate::stats::mean(&per_path_lhs));
        rhs.push(crate::stats::mean(&per_path_rhs));
        margin_se.push(m_se);
        if j > 0 {
            worst = worst.max(-m_mean / m_se);
        }
        let unit_l: Vec<f64> = traces
            .iter()
            .enumerate()
            .map(|(p, tr)| tr.h_norm_sq[j] + int_v[p])
            .collect();
        let unit_r: Vec<f64> = (0..n_paths)
            .map(|p| x0_h_norm_sq + 2.0 * int_h[p])
            .collect();
        lhs_unit.push(crate::stats::mean(&unit_l));
        rhs_unit.push(crate::stats::mean(&unit_r));
    }
    // time-average consequence at the final time:
    // (1/t) E int nu ||X||^2 <= |x|^2/t + E h^2/(nu l1) + Tr C
    let t_final = *times.last().unwrap();
    let time_avg_lhs = viscosity * crate::stats::mean(&int_v) / t_final;
    let time_avg_rhs =
        x0_h_norm_sq / t_final + crate::stats::mean(&int_h) / (t_final * viscosity * lambda1) + trace_c;
    let avg_margins: Vec<f64> = (0..n_paths)
        .map(|p| {
            x0_h_norm_sq / t_final + int_h[p] / (t_final * viscosity * lambda1) + trace_c
                - viscosity * int_v[p] / t_final
        })
        .collect();
    let avg_z = -crate::stats::mean(&avg_margins) / crate::stats::std_error(&avg_margins).max(1e-300);
    worst = worst.max(avg_z);
    let pass = worst <= 3.0;
    EnergyAudit {
        times,
        lhs,
        rhs,
        margin_se,
        lhs_unit_form: lhs_unit,
        rhs_unit_form: rhs_unit,
        time_avg_lhs,
        time_avg_rhs,
        pass,
        worst_violation_sigmas: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driving::DrivingPath;
    use crate::integrator::{integrate, StepScheme, WienerStream};
    use crate::rng::{CounterRng, StreamId};
    use crate::stats;
    use rustfft::num_complex::Complex;

    fn random_packed(grid: &SpectralGrid, seed: u64, amp: f64) -> Vec<f64> {
        let rng = CounterRng::new(seed, StreamId::Auxiliary(20));
        (0..grid.dim())
            .map(|i| amp * rng.normal(i as u64, 0))
            .collect()
    }

    #[test]
    fn grid_mode_set_is_shell_sorted_and_conjugate_free() {
        let grid = SpectralGrid::new(16).unwrap();
        assert_eq!(grid.kmax, 5);
        assert_eq!(grid.modes.len(), (11 * 11 - 1) / 2);
        for w in grid.modes.windows(2) {
            let (a1, a2) = w[0];
            let (b1, b2) = w[1];
            assert!(a1 * a1 + a2 * a2 <= b1 * b1 + b2 * b2);
        }
        // the four lowest shells hold ten representatives
        let shells: Vec<i32> = grid.modes.iter().map(|&(k1, k2)| k1 * k1 + k2 * k2).collect();
        assert_eq!(&shells[..10], &[1, 1, 2, 2, 4, 4, 5, 5, 5, 5]);
    }

    #[test]
    fn pack_unpack_roundtrip_and_symmetry() {
        let grid = SpectralGrid::new(8).unwrap();
        let packed = random_packed(&grid, 1, 1.0);
        let field = grid.unpack(&packed);
        assert_eq!(grid.asymmetry(&field), 0.0);
        assert_eq!(grid.pack(&field), packed);
        // physical field is real
        let phys = grid.to_physical(&field);
        let max_im = phys.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        assert!(max_im < 1e-12);
    }

    #[test]
    fn single_mode_self_advection_vanishes() {
        let grid = SpectralGrid::new(16).unwrap();
        for m in [0usize, 3, 11] {
            let mut packed = vec![0.0; grid.dim()];
            packed[2 * m] = 0.8;
            packed[2 * m + 1] = -0.3;
            let n = nonlinear_term(&grid, &packed);
            let max = n.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(max < 1e-13, "mode {m}: residual {max}");
        }
    }

    /// Exact spectral convolution of the advection term, restricted to the
    /// retained set; independent of the FFT path.
    fn brute_force_advection(grid: &SpectralGrid, packed: &[f64]) -> Vec<f64> {
        let omega = grid.unpack(packed);
        let full: Vec<(i32, i32)> = grid
            .modes
            .iter()
            .flat_map(|&(k1, k2)| [(k1, k2), (-k1, -k2)])
            .collect();
        let mut out = vec![Complex::new(0.0, 0.0); grid.n * grid.n];
        for &(k1, k2) in &grid.modes {
            let mut acc = Complex::new(0.0, 0.0);
            for &(p1, p2) in &full {
                let (q1, q2) = (k1 - p1, k2 - p2);
                if (q1, q2) == (0, 0) || q1.abs() > grid.kmax || q2.abs() > grid.kmax {
                    continue;
                }
                let wp = omega[grid.flat(p1, p2)];
                let wq = omega[grid.flat(q1, q2)];
                let psq = (p1 * p1 + p2 * p2) as f64;
                let i = Complex::new(0.0, 1.0);
                let ux = i * (p2 as f64) * wp / psq;
                let uy = -i * (p1 as f64) * wp / psq;
                let grad = i * Complex::new(0.0, 0.0)
                    + (ux * (q1 as f64) + uy * (q2 as f64)) * i * wq;
                acc += grad;
            }
            out[grid.flat(k1, k2)] = -acc;
            out[grid.flat(-k1, -k2)] = -acc.conj();
        }
        grid.pack(&out)
    }

    #[test]
    fn pseudospectral_matches_brute_force_convolution() {
        let grid = SpectralGrid::new(8).unwrap();
        // two-mode input
        let mut packed = vec![0.0; grid.dim()];
        packed[0] = 1.0;
        packed[1] = 0.5;
        packed[6] = -0.7;
        packed[7] = 0.2;
        let fast = nonlinear_term(&grid, &packed);
        let slow = brute_force_advection(&grid, &packed);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // and a dense random field
        let packed = random_packed(&grid, 7, 0.5);
        let fast = nonlinear_term(&grid, &packed);
        let slow = brute_force_advection(&grid, &packed);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
    }

    #[test]
    fn advection_is_energy_and_enstrophy_neutral() {
        let grid = SpectralGrid::new(8).unwrap();
        let packed = random_packed(&grid, 3, 1.0);
        let nl = nonlinear_term(&grid, &packed);
        // enstrophy pairing <N, w> and energy pairing <N, psi>
        let scale_z = dot_full(&nl, &nl).sqrt() * dot_full(&packed, &packed).sqrt();
        let z_pair = dot_full(&nl, &packed).abs() / scale_z;
        assert!(z_pair < 1e-10, "enstrophy pairing {z_pair}");
        let psi: Vec<f64> = packed
            .iter()
            .enumerate()
            .map(|(i, v)| v / grid.k_squared(i / 2))
            .collect();
        let e_pair = dot_full(&nl, &psi).abs() / scale_z;
        assert!(e_pair < 1e-10, "energy pairing {e_pair}");

        // direct grid-quadrature oracle for the same pairings
        let omega = grid.unpack(&packed);
        let nl_full = grid.unpack(&nl);
        let psi_full = grid.unpack(&psi);
        let w_phys = grid.to_physical(&omega);
        let n_phys = grid.to_physical(&nl_full);
        let p_phys = grid.to_physical(&psi_full);
        let m = (grid.n * grid.n) as f64;
        let quad_z: f64 = w_phys.iter().zip(&n_phys).map(|(a, b)| a.re * b.re).sum::<f64>() / m;
        let quad_e: f64 = p_phys.iter().zip(&n_phys).map(|(a, b)| a.re * b.re).sum::<f64>() / m;
        assert!(quad_z.abs() / scale_z < 1e-10);
        assert!(quad_e.abs() / scale_z < 1e-10);
    }

    #[test]
    fn nonlinear_output_is_conjugate_symmetric() {
        let grid = SpectralGrid::new(16).unwrap();
        let packed = random_packed(&grid, 9, 1.0);
        assert!(nonlinear_term_asymmetry(&grid, &packed) < 1e-12);
    }

    #[test]
    fn inviscid_truncation_conserves_energy_and_enstrophy() {
        let grid = SpectralGrid::new(32).unwrap();
        let mut packed = random_packed(&grid, 11, 0.5);
        let e0 = energy(&grid, &packed);
        let z0 = enstrophy(&grid, &packed);
        let dt = 1e-3;
        for _ in 0..200 {
            packed = inviscid_rk4_step(&grid, &packed, dt);
        }
        // 0.2 time units; budget 1e-8 relative per unit time
        let e_drift = (energy(&grid, &packed) - e0).abs() / e0;
        let z_drift = (enstrophy(&grid, &packed) - z0).abs() / z0;
        assert!(e_drift < 0.2 * 1e-8, "energy drift {e_drift}");
        assert!(z_drift < 0.2 * 1e-8, "enstrophy drift {z_drift}");
    }

    fn test_spec() -> NsModelSpec {
        NsModelSpec {
            viscosity: 1.0,
            alpha: 3.0,
            trace_c: 1.0,
            coupling_gain: 1.0,
            driving_modes: 10,
        }
    }

    #[test]
    fn spec_validation_and_trace_normalization() {
        let grid = SpectralGrid::new(16).unwrap();
        let spec = test_spec();
        spec.validate(&grid).unwrap();
        let total: f64 = (0..grid.modes.len()).map(|m| 2.0 * spec.c_k(&grid, m)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(spec.nondegeneracy_floor(&grid) > 0.0);
        let bad = NsModelSpec { alpha: 1.5, ..test_spec() };
        assert!(bad.validate(&grid).is_err());
    }

    #[test]
    fn semilinear_assembly_diagonal_and_poincare() {
        let grid = SpectralGrid::new(16).unwrap();
        let spec = NsModelSpec { viscosity: 0.37, ..test_spec() };
        let model = as_semilinear(&spec, &grid).unwrap();
        assert_eq!(model.dim_h, grid.dim());
        assert!((model.lambda1() - 0.37).abs() < 1e-12);
        for m in 0..grid.modes.len() {
            assert!((model.a_eigs[2 * m] + 0.37 * grid.k_squared(m)).abs() < 1e-12);
        }
    }

    #[test]
    fn growth_bound_holds_under_random_probing() {
        let grid = SpectralGrid::new(8).unwrap();
        let spec = test_spec();
        let model = as_semilinear(&spec, &grid).unwrap();
        let worst = model.probe_growth(2 * spec.driving_modes, 1000, 5).unwrap();
        assert!(worst <= 0.0, "violation {worst}");
    }

    #[test]
    fn linearized_modes_reach_the_ou_stationary_variance() {
        // velocity mode variance c_k / (2 nu |k|^2), vorticity coordinate
        // variance c_k / (4 nu)
        let grid = SpectralGrid::new(8).unwrap();
        let spec = test_spec();
        let nu = spec.viscosity;
        let mut sigma = vec![0.0; grid.dim()];
        let mut a_eigs = vec![0.0; grid.dim()];
        for m in 0..grid.modes.len() {
            let ksq = grid.k_squared(m);
            a_eigs[2 * m] = -nu * ksq;
            a_eigs[2 * m + 1] = -nu * ksq;
            let s = ksq.sqrt() * (spec.c_k(&grid, m) / 2.0).sqrt();
            sigma[2 * m] = s;
            sigma[2 * m + 1] = s;
        }
        let model = crate::integrator::SemilinearModel::linear(a_eigs, sigma).unwrap();
        let dt = 0.01;
        let horizon = 12.0;
        let n_grid = (horizon / dt) as usize;
        let driving = DrivingPath::from_samples(
            crate::driving::OuSpec::new(vec![-1.0], vec![0.0]).unwrap(),
            dt,
            horizon,
            vec![vec![0.0]; n_grid + 1],
            0,
        )
        .unwrap();
        let scheme = StepScheme::exponential_euler(dt);
        let n_paths = 4000;
        let mode = 4; // |k|^2 = 4
        let vals: Vec<f64> = (0..n_paths)
            .map(|i| {
                let x = integrate(
                    &model,
                    &scheme,
                    &vec![0.0; grid.dim()],
                    0.0,
                    horizon,
                    &driving,
                    &WienerStream::new(1000 + i as u64),
                )
                .unwrap();
                x[2 * mode]
            })
            .collect();
        let want = spec.c_k(&grid, mode) / (4.0 * nu);
        let got = stats::variance(&vals);
        let se = want * (2.0 / n_paths as f64).sqrt();
        assert!((got - want).abs() < 4.0 * se, "var {got} vs {want}");
    }

    #[test]
    fn linear_part_dissipates_pathwise() {
        // forcing off: |X(t)|_H <= e^{-lambda1 t} |x|_H along every path
        let grid = SpectralGrid::new(8).unwrap();
        let nu = 0.7;
        let mut a_eigs = vec![0.0; grid.dim()];
        for m in 0..grid.modes.len() {
            a_eigs[2 * m] = -nu * grid.k_squared(m);
            a_eigs[2 * m + 1] = -nu * grid.k_squared(m);
        }
        let model = crate::integrator::SemilinearModel::linear(a_eigs, vec![0.0; grid.dim()]).unwrap();
        let dt = 0.01;
        let n_grid = (3.0 / dt) as usize;
        let driving = DrivingPath::from_samples(
            crate::driving::OuSpec::new(vec![-1.0], vec![0.0]).unwrap(),
            dt,
            3.0,
            vec![vec![0.0]; n_grid + 1],
            0,
        )
        .unwrap();
        let scheme = StepScheme::exponential_euler(dt);
        let rng = CounterRng::new(5, StreamId::Auxiliary(21));
        let x0: Vec<f64> = (0..grid.dim()).map(|i| rng.normal(i as u64, 0)).collect();
        let e0 = energy(&grid, &x0);
        for t in [0.5, 1.5, 3.0] {
            let x = integrate(&model, &scheme, &x0, 0.0, t, &driving, &WienerStream::new(0)).unwrap();
            let cap = (-2.0 * nu * t).exp() * e0;
            assert!(energy(&grid, &x) <= cap * (1.0 + 1e-12), "t={t}");
        }
    }

    #[test]
    fn snapshot_csv_roundtrip() {
        let grid = SpectralGrid::new(8).unwrap();
        let packed = random_packed(&grid, 21, 1.0);
        let csv = snapshot_csv(&grid, &packed);
        assert!(csv.starts_with("k1,k2,re,im\n"));
        assert_eq!(csv.lines().count(), grid.modes.len() + 1);
        let back = snapshot_from_csv(&grid, &csv).unwrap();
        assert_eq!(back, packed);
        assert!(snapshot_from_csv(&grid, "k1,k2,re,im\n0,0,1,2\n").is_err());
    }

    #[test]
    fn energy_audit_passes_on_the_linear_instance() {
        let grid = SpectralGrid::new(8).unwrap();
        let spec = test_spec();
        let model = as_semilinear(&spec, &grid).unwrap();
        let driver = spec.ou_driver();
        let dt = 0.01;
        let horizon = 2.0;
        let scheme = StepScheme::exponential_euler(dt);
        let kappa3 = spec.kappa3();
        let n_paths = 100;
        let traces: Vec<EnergyTrace> = (0..n_paths)
            .map(|i| {
                let path = DrivingPath::stationary(driver.clone(), horizon, dt, 40 + i as u64)
                    .unwrap()
                    .shift_time(horizon);
                let w = WienerStream::new(10_000 + i as u64);
                let mut x = vec![0.0; grid.dim()];
                let mut times = vec![0.0];
                let mut hs = vec![energy(&grid, &x)];
                let mut vs = vec![enstrophy(&grid, &x)];
                let y0 = crate::stats::norm2(path.value_at(0.0));
                let mut hy = vec![(kappa3 * (1.0 + y0)).powi(2)];
                let rec = 10usize;
                let n_steps = (horizon / dt).round() as usize / rec;
                for b in 0..n_steps {
                    let t0 = (b * rec) as f64 * dt;
                    let t1 = t0 + rec as f64 * dt;
                    x = integrate(&model, &scheme, &x, t0, t1, &path, &w).unwrap();
                    times.push(t1);
                    hs.push(energy(&grid, &x));
                    vs.push(enstrophy(&grid, &x));
                    let yn = crate::stats::norm2(path.value_at(t1));
                    hy.push((kappa3 * (1.0 + yn)).powi(2));
                }
                EnergyTrace {
                    times,
                    h_norm_sq: hs,
                    v_norm_sq: vs,
                    h_of_y_sq: hy,
                }
            })
            .collect();
        let audit = energy_audit(&traces, 0.0, spec.viscosity, 1.0, spec.trace_c);
        assert!(audit.pass, "worst violation {} sigmas", audit.worst_violation_sigmas);
        assert!(audit.time_avg_lhs <= audit.time_avg_rhs);
    }
}
