//! The smooth driving noise: an Ornstein-Uhlenbeck process in a finite
//! spectral truncation, its Markov extension forward in time, and the
//! history process that carries a truncated past window along.
//!
//! A [`DrivingPath`] is one frozen realization of the driver on a time
//! window. All randomness is counter-based and indexed by the absolute grid
//! position, so advancing a path twice consumes exactly the increments the
//! one-shot advancement consumes: the flow law holds bit for bit on grid
//! points.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::rng::{CounterRng, StreamId};

/// Sub-stream carrying the per-step OU increments.
const SUB_STEPS: u64 = 0;
/// Sub-stream carrying stationary initial draws.
const SUB_INIT: u64 = 1;

/// Diagonal Ornstein-Uhlenbeck specification: dY = B Y dt + S dV with
/// B = diag(drift_eigs) strictly negative and S = diag(noise_scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuSpec {
    pub dim: usize,
    pub drift_eigs: Vec<f64>,
    pub noise_scale: Vec<f64>,
}

impl OuSpec {
    pub fn new(drift_eigs: Vec<f64>, noise_scale: Vec<f64>) -> Result<Self, CoreError> {
        let dim = drift_eigs.len();
        if dim == 0 {
            return Err(CoreError::invalid("drift_eigs", "empty spectrum"));
        }
        if noise_scale.len() != dim {
            return Err(CoreError::invalid(
                "noise_scale",
                format!("length {} != dim {}", noise_scale.len(), dim),
            ));
        }
        if let Some(b) = drift_eigs.iter().find(|b| !(**b < 0.0)) {
            return Err(CoreError::invalid(
                "drift_eigs",
                format!("eigenvalue {b} is not strictly negative"),
            ));
        }
        if let Some(s) = noise_scale.iter().find(|s| !(**s >= 0.0)) {
            return Err(CoreError::invalid(
                "noise_scale",
                format!("scale {s} is negative"),
            ));
        }
        let spec = OuSpec {
            dim,
            drift_eigs,
            noise_scale,
        };
        for k in 0..dim {
            let v = spec.stationary_variance(k);
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::invalid(
                    "noise_scale",
                    format!("mode {k} has degenerate stationary variance {v}"),
                ));
            }
        }
        Ok(spec)
    }

    /// Scalar unit driver: drift -1, scale 1; stationary variance 1/2.
    pub fn unit() -> Self {
        OuSpec::new(vec![-1.0], vec![1.0]).unwrap()
    }

    /// Stationary variance of mode `k`: scale^2 / (-2 b).
    pub fn stationary_variance(&self, k: usize) -> f64 {
        let b = self.drift_eigs[k];
        let s = self.noise_scale[k];
        s * s / (-2.0 * b)
    }

    /// Sum of stationary variances, i.e. the stationary second moment of |Y|.
    pub fn total_stationary_variance(&self) -> f64 {
        (0..self.dim).map(|k| self.stationary_variance(k)).sum()
    }
}

/// Truncated past window of the driver: values at grid angles
/// theta in {-t_hist, ..., -dt, 0}; the last sample is h(0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub t_hist: f64,
    pub dt: f64,
    pub samples: Vec<Vec<f64>>,
}

impl HistoryWindow {
    pub fn steps(&self) -> usize {
        self.samples.len() - 1
    }

    /// Value at theta = 0.
    pub fn head(&self) -> &[f64] {
        self.samples.last().expect("window is never empty")
    }

    /// Value at grid angle theta = -j dt (j = 0 is the head).
    pub fn at_back(&self, j: usize) -> &[f64] {
        &self.samples[self.samples.len() - 1 - j]
    }
}

/// One realization of the driver on a window of absolute time, together with
/// the seed that keys its increments. `t_origin` is the absolute time of
/// theta = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingPath {
    pub spec: OuSpec,
    pub seed: u64,
    pub t_origin: f64,
    #[serde(flatten)]
    pub window: HistoryWindow,
}

/// Checks that `x` is a nonnegative integer multiple of `dt` and returns the
/// step count.
pub fn grid_steps(x: f64, dt: f64) -> Result<u64, CoreError> {
    if dt <= 0.0 {
        return Err(CoreError::invalid("dt", "must be positive"));
    }
    let n = (x / dt).round();
    if n < 0.0 || (x - n * dt).abs() > 1e-9 * dt.max(x.abs()) {
        return Err(CoreError::OffGrid(x, dt));
    }
    Ok(n as u64)
}

fn grid_index(t: f64, dt: f64) -> i64 {
    (t / dt).round() as i64
}

/// Exact OU transition over one step: per mode,
/// y' = e^{b dt} y + scale * sqrt((1 - e^{2 b dt}) / (-2 b)) * xi.
/// No discretization bias at any dt.
pub fn ou_step(spec: &OuSpec, y: &[f64], dt: f64, noise: &[f64]) -> Vec<f64> {
    assert!(dt > 0.0, "ou_step needs dt > 0");
    assert_eq!(y.len(), spec.dim);
    assert_eq!(noise.len(), spec.dim);
    (0..spec.dim)
        .map(|k| {
            let b = spec.drift_eigs[k];
            let decay = (b * dt).exp();
            let sd = spec.noise_scale[k] * ((1.0 - (2.0 * b * dt).exp()) / (-2.0 * b)).sqrt();
            decay * y[k] + sd * noise[k]
        })
        .collect()
}

/// A draw from the stationary law N(0, diag(scale^2 / (-2 b))); deterministic
/// given the seed.
pub fn sample_stationary(spec: &OuSpec, seed: u64) -> Vec<f64> {
    let rng = CounterRng::new(seed, StreamId::Driving(SUB_INIT));
    (0..spec.dim)
        .map(|k| spec.stationary_variance(k).sqrt() * rng.normal(0, k as u64))
        .collect()
}

impl DrivingPath {
    /// Builds a stationary history ending at `t_origin = 0`: the window is
    /// seeded with a stationary draw at theta = -t_hist and stepped forward
    /// with the exact transition, so the marginal at every grid point is the
    /// stationary law.
    pub fn stationary(spec: OuSpec, t_hist: f64, dt: f64, seed: u64) -> Result<Self, CoreError> {
        let steps = grid_steps(t_hist, dt)? as i64;
        if steps == 0 {
            return Err(CoreError::invalid("t_hist", "window must contain at least one step"));
        }
        let rng = CounterRng::new(seed, StreamId::Driving(SUB_STEPS));
        let init = CounterRng::new(seed, StreamId::Driving(SUB_INIT));
        let start_idx = -steps;
        let mut y: Vec<f64> = (0..spec.dim)
            .map(|k| spec.stationary_variance(k).sqrt() * init.normal(start_idx as u64, k as u64))
            .collect();
        let mut samples = Vec::with_capacity(steps as usize + 1);
        samples.push(y.clone());
        for g in start_idx..0 {
            let noise = rng.normal_vec(g as u64, spec.dim);
            y = ou_step(&spec, &y, dt, &noise);
            samples.push(y.clone());
        }
        Ok(DrivingPath {
            spec,
            seed,
            t_origin: 0.0,
            window: HistoryWindow {
                t_hist,
                dt,
                samples,
            },
        })
    }

    /// Wraps externally supplied samples (e.g. a deterministic forcing) in a
    /// path. The last sample is the value at `t_origin`.
    pub fn from_samples(
        spec: OuSpec,
        dt: f64,
        t_origin: f64,
        samples: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self, CoreError> {
        if samples.len() < 2 {
            return Err(CoreError::invalid("samples", "need at least two grid points"));
        }
        if samples.iter().any(|s| s.len() != spec.dim) {
            return Err(CoreError::invalid("samples", "dimension mismatch"));
        }
        let t_hist = (samples.len() - 1) as f64 * dt;
        Ok(DrivingPath {
            spec,
            seed,
            t_origin,
            window: HistoryWindow {
                t_hist,
                dt,
                samples,
            },
        })
    }

    pub fn dt(&self) -> f64 {
        self.window.dt
    }

    /// Absolute time of the oldest retained grid point.
    pub fn t_min(&self) -> f64 {
        self.t_origin - self.window.t_hist
    }

    /// Advances the history by `t` (a grid multiple) using this path's own
    /// noise stream: the head moves along the Markov extension of the driver
    /// and the oldest `t/dt` entries fall off the back.
    pub fn advance(&self, t: f64) -> Result<DrivingPath, CoreError> {
        self.advance_seeded(t, self.seed)
    }

    /// Like [`DrivingPath::advance`] but keyed by `seed`, for fresh-noise
    /// continuations of a frozen window. Increments are still indexed by
    /// absolute grid position, so equal seeds replay identically.
    pub fn advance_seeded(&self, t: f64, seed: u64) -> Result<DrivingPath, CoreError> {
        let n = grid_steps(t, self.window.dt)? as i64;
        if n == 0 {
            return Ok(self.clone());
        }
        let rng = CounterRng::new(seed, StreamId::Driving(SUB_STEPS));
        let origin_idx = grid_index(self.t_origin, self.window.dt);
        // off-grid remainder of the origin, zero in normal use; carrying it
        // keeps composed advances bit-identical to one-shot advances
        let origin_frac = self.t_origin - origin_idx as f64 * self.window.dt;
        let mut samples = self.window.samples.clone();
        let mut y = self.window.head().to_vec();
        for g in origin_idx..origin_idx + n {
            let noise = rng.normal_vec(g as u64, self.spec.dim);
            y = ou_step(&self.spec, &y, self.window.dt, &noise);
            samples.push(y.clone());
        }
        samples.drain(..n as usize);
        Ok(DrivingPath {
            spec: self.spec.clone(),
            seed: self.seed,
            t_origin: (origin_idx + n) as f64 * self.window.dt + origin_frac,
            window: HistoryWindow {
                t_hist: self.window.t_hist,
                dt: self.window.dt,
                samples,
            },
        })
    }

    /// Relabels absolute time without touching the samples; used to express
    /// the consistency law "same past, shifted clock".
    pub fn shift_time(&self, delta: f64) -> DrivingPath {
        let mut out = self.clone();
        out.t_origin += delta;
        out
    }

    /// Checks that the window covers `[lo, hi]` in absolute time.
    pub fn check_covers(&self, lo: f64, hi: f64) -> Result<(), CoreError> {
        let tol = 1e-9 * self.window.dt;
        if lo < self.t_min() - tol || hi > self.t_origin + tol {
            return Err(CoreError::Coverage {
                cover_lo: self.t_min(),
                cover_hi: self.t_origin,
                want_lo: lo,
                want_hi: hi,
            });
        }
        Ok(())
    }

    /// Left-point evaluation of the driver at absolute time `t`: the value at
    /// the largest grid point <= t.
    pub fn value_at(&self, t: f64) -> &[f64] {
        let dt = self.window.dt;
        let idx = ((t - self.t_min()) / dt + 1e-9).floor() as i64;
        let idx = idx.clamp(0, self.window.samples.len() as i64 - 1) as usize;
        &self.window.samples[idx]
    }

    /// Largest |Y| over the retained window; feeds truncation-error bounds.
    pub fn sup_norm(&self) -> f64 {
        self.window
            .samples
            .iter()
            .map(|s| crate::stats::norm2(s))
            .fold(0.0, f64::max)
    }
}
