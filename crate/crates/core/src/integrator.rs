//! Time-stepping for the semilinear equation
//! dX = (A X + b(X) + g(X, Y)) dt + sigma(X, Y) dW
//! in Galerkin coordinates, under a frozen driving realization.
//!
//! The Wiener increments are counter-based and indexed by absolute grid
//! position relative to a stream epoch, so splitting an integration interval
//! replays exactly the same increments: the transition operators compose
//! pathwise, bit for bit.

use std::sync::Arc;

use rayon::prelude::*;

use crate::driving::{grid_steps, DrivingPath};
use crate::error::{CoreError, Divergence};
use crate::measures::EmpiricalMeasure;
use crate::rng::{CounterRng, StreamId};
use crate::stats::norm2;

/// Default blow-up guard in the H-norm. Desk-scale models never get close;
/// reaching it signals a bug, not dynamics.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// Exact linear propagation per mode, with the exact per-mode variance of
    /// the stochastic convolution increment. Default; exact on linear models.
    ExponentialEuler,
    /// Plain first-order weak scheme; kept for convergence-order checks.
    EulerMaruyama,
}

#[derive(Debug, Clone, Copy)]
pub struct StepScheme {
    pub dt: f64,
    pub kind: SchemeKind,
}

impl StepScheme {
    pub fn exponential_euler(dt: f64) -> Self {
        StepScheme {
            dt,
            kind: SchemeKind::ExponentialEuler,
        }
    }

    pub fn euler_maruyama(dt: f64) -> Self {
        StepScheme {
            dt,
            kind: SchemeKind::EulerMaruyama,
        }
    }
}

/// Identifies one Wiener noise stream. `epoch` is the time of counter zero;
/// shifting the epoch together with the time axis reproduces a run under a
/// relabeled clock, increment for increment.
#[derive(Debug, Clone, Copy)]
pub struct WienerStream {
    pub seed: u64,
    pub epoch: f64,
}

impl WienerStream {
    pub fn new(seed: u64) -> Self {
        WienerStream { seed, epoch: 0.0 }
    }

    pub fn with_epoch(seed: u64, epoch: f64) -> Self {
        WienerStream { seed, epoch }
    }
}

type FieldFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type CoupledFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Growth bound h(r) = kappa3 (1 + r) that the coupling and diffusion are
/// declared to satisfy: |g(x,y)| <= h(|y|), ||sigma(x,y)|| <= h(|y|).
#[derive(Debug, Clone, Copy)]
pub struct GrowthBound {
    pub kappa3: f64,
}

impl GrowthBound {
    pub fn h(&self, r: f64) -> f64 {
        self.kappa3 * (1.0 + r)
    }
}

/// Abstract model (A, b, g, sigma) in Galerkin coordinates with diagonal A
/// and diagonal diffusion.
#[derive(Clone)]
pub struct SemilinearModel {
    pub dim_h: usize,
    pub a_eigs: Vec<f64>,
    nonlinearity: FieldFn,
    coupling: CoupledFn,
    diffusion: CoupledFn,
    pub growth: Option<GrowthBound>,
    pub blowup_bound: f64,
    /// Coordinate weights of the H inner product: |x|_H^2 = sum w_i x_i^2.
    /// Unit weights unless the instance says otherwise (the vorticity
    /// representation of the fluid model weights coordinates by 2/|k|^2).
    pub h_weights: Vec<f64>,
}

impl std::fmt::Debug for SemilinearModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemilinearModel")
            .field("dim_h", &self.dim_h)
            .field("a_eigs", &self.a_eigs)
            .field("growth", &self.growth)
            .field("blowup_bound", &self.blowup_bound)
            .finish_non_exhaustive()
    }
}

impl SemilinearModel {
    pub fn new(
        a_eigs: Vec<f64>,
        nonlinearity: FieldFn,
        coupling: CoupledFn,
        diffusion: CoupledFn,
    ) -> Result<Self, CoreError> {
        if a_eigs.is_empty() {
            return Err(CoreError::invalid("a_eigs", "empty spectrum"));
        }
        if let Some(a) = a_eigs.iter().find(|a| !(**a <= 0.0)) {
            return Err(CoreError::invalid(
                "a_eigs",
                format!("eigenvalue {a} is positive"),
            ));
        }
        let dim = a_eigs.len();
        Ok(SemilinearModel {
            dim_h: dim,
            a_eigs,
            nonlinearity,
            coupling,
            diffusion,
            growth: None,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            h_weights: vec![1.0; dim],
        })
    }

    /// Purely linear model: b = 0, g(x,y) = 0, sigma constant diagonal.
    pub fn linear(a_eigs: Vec<f64>, sigma_diag: Vec<f64>) -> Result<Self, CoreError> {
        let dim = a_eigs.len();
        if sigma_diag.len() != dim {
            return Err(CoreError::invalid("sigma_diag", "dimension mismatch"));
        }
        SemilinearModel::new(
            a_eigs,
            Arc::new(move |_x: &[f64]| vec![0.0; dim]),
            Arc::new(move |_x: &[f64], _y: &[f64]| vec![0.0; dim]),
            Arc::new(move |_x: &[f64], _y: &[f64]| sigma_diag.clone()),
        )
    }

    pub fn with_growth(mut self, kappa3: f64) -> Self {
        self.growth = Some(GrowthBound { kappa3 });
        self
    }

    pub fn with_blowup_bound(mut self, bound: f64) -> Self {
        self.blowup_bound = bound;
        self
    }

    pub fn with_h_weights(mut self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.dim_h);
        self.h_weights = weights;
        self
    }

    /// Norm of a state (or of g(x,y)) in the H inner product.
    pub fn h_norm(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.h_weights)
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Hilbert-Schmidt norm over H of the diagonal diffusion at (x, y).
    pub fn diffusion_hs_norm(&self, x: &[f64], y: &[f64]) -> f64 {
        self.h_norm(&self.diffusion(x, y))
    }

    /// Poincare constant: smallest dissipation rate, -max a_eig.
    pub fn lambda1(&self) -> f64 {
        -self
            .a_eigs
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn nonlinearity(&self, x: &[f64]) -> Vec<f64> {
        (self.nonlinearity)(x)
    }

    pub fn coupling(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (self.coupling)(x, y)
    }

    pub fn diffusion(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (self.diffusion)(x, y)
    }

    /// Randomized probe of the declared growth bound over `n` draws; returns
    /// the worst violation margin (negative when the bound holds).
    pub fn probe_growth(&self, y_dim: usize, n: usize, seed: u64) -> Result<f64, CoreError> {
        let growth = self
            .growth
            .ok_or_else(|| CoreError::invalid("growth", "no growth bound configured"))?;
        let rng = CounterRng::new(seed, StreamId::Auxiliary(0));
        let mut worst = f64::NEG_INFINITY;
        for i in 0..n {
            let scale = 10.0_f64.powf(rng.uniform(i as u64, 1000) * 3.0 - 1.0);
            let x: Vec<f64> = (0..self.dim_h)
                .map(|j| scale * rng.normal(i as u64, j as u64))
                .collect();
            let y: Vec<f64> = (0..y_dim)
                .map(|j| scale * rng.normal(i as u64, (self.dim_h + j) as u64))
                .collect();
            let cap = growth.h(norm2(&y));
            let g = self.h_norm(&self.coupling(&x, &y));
            let s = self.diffusion_hs_norm(&x, &y);
            worst = worst.max(g - cap).max(s - cap);
        }
        Ok(worst)
    }
}

/// (e^{a dt} - 1)/a, the exact integral of the semigroup over one step.
fn phi1(a: f64, dt: f64) -> f64 {
    if a.abs() * dt < 1e-12 {
        dt
    } else {
        libm::expm1(a * dt) / a
    }
}

/// Standard deviation of the stochastic convolution increment
/// int_0^dt e^{a(dt-r)} dW(r): sqrt((1 - e^{2 a dt})/(-2a)).
fn conv_std(a: f64, dt: f64) -> f64 {
    if a.abs() * dt < 1e-12 {
        dt.sqrt()
    } else {
        (libm::expm1(2.0 * a * dt) / (2.0 * a)).sqrt()
    }
}

/// One deterministic step (noise already sampled into `xi`).
fn step(
    model: &SemilinearModel,
    scheme: &StepScheme,
    x: &[f64],
    y: &[f64],
    xi: &[f64],
) -> Vec<f64> {
    let b = model.nonlinearity(x);
    let g = model.coupling(x, y);
    let sig = model.diffusion(x, y);
    let dt = scheme.dt;
    match scheme.kind {
        SchemeKind::ExponentialEuler => (0..model.dim_h)
            .map(|i| {
                let a = model.a_eigs[i];
                (a * dt).exp() * x[i] + phi1(a, dt) * (b[i] + g[i]) + sig[i] * conv_std(a, dt) * xi[i]
            })
            .collect(),
        SchemeKind::EulerMaruyama => (0..model.dim_h)
            .map(|i| {
                x[i] + (model.a_eigs[i] * x[i] + b[i] + g[i]) * dt + sig[i] * dt.sqrt() * xi[i]
            })
            .collect(),
    }
}

/// Mean and per-mode standard deviation of one scheme step from `x` under
/// driver value `y`; the one-step transition is exactly this Gaussian when
/// the noise is additive. Feeds the one-step maximal coupling.
pub fn one_step_gaussian(
    model: &SemilinearModel,
    scheme: &StepScheme,
    x: &[f64],
    y: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let b = model.nonlinearity(x);
    let g = model.coupling(x, y);
    let sig = model.diffusion(x, y);
    let dt = scheme.dt;
    match scheme.kind {
        SchemeKind::ExponentialEuler => {
            let mean = (0..model.dim_h)
                .map(|i| {
                    let a = model.a_eigs[i];
                    (a * dt).exp() * x[i] + phi1(a, dt) * (b[i] + g[i])
                })
                .collect();
            let std = (0..model.dim_h)
                .map(|i| sig[i].abs() * conv_std(model.a_eigs[i], dt))
                .collect();
            (mean, std)
        }
        SchemeKind::EulerMaruyama => {
            let mean = (0..model.dim_h)
                .map(|i| x[i] + (model.a_eigs[i] * x[i] + b[i] + g[i]) * dt)
                .collect();
            let std = (0..model.dim_h).map(|i| sig[i].abs() * dt.sqrt()).collect();
            (mean, std)
        }
    }
}

impl SemilinearModel {
    /// The noiseless unforced system dX/dt = A X + b(X): coupling and
    /// diffusion stripped.
    pub fn deterministic_part(&self) -> SemilinearModel {
        let dim = self.dim_h;
        SemilinearModel {
            dim_h: self.dim_h,
            a_eigs: self.a_eigs.clone(),
            nonlinearity: self.nonlinearity.clone(),
            coupling: Arc::new(move |_x: &[f64], _y: &[f64]| vec![0.0; dim]),
            diffusion: Arc::new(move |_x: &[f64], _y: &[f64]| vec![0.0; dim]),
            growth: self.growth,
            blowup_bound: self.blowup_bound,
            h_weights: self.h_weights.clone(),
        }
    }
}

/// Integrates X(t, s, x0) under the frozen driving realization. The driver is
/// evaluated by the left-point rule on its own grid; the Wiener increments
/// come from `w`, counted by absolute step index.
pub fn integrate(
    model: &SemilinearModel,
    scheme: &StepScheme,
    x0: &[f64],
    s: f64,
    t: f64,
    driving: &DrivingPath,
    w: &WienerStream,
) -> Result<Vec<f64>, CoreError> {
    if t < s {
        return Err(CoreError::invalid("t", "integration needs t >= s"));
    }
    let n_steps = grid_steps(t - s, scheme.dt)?;
    driving.check_covers(s, t)?;
    let rng = CounterRng::new(w.seed, StreamId::Wiener(0));
    let mut x = x0.to_vec();
    let mut xi = vec![0.0; model.dim_h];
    for k in 0..n_steps {
        let time = s + k as f64 * scheme.dt;
        let counter = ((time - w.epoch) / scheme.dt).round() as i64;
        rng.fill_normal(counter as u64, &mut xi);
        let y = driving.value_at(time);
        x = step(model, scheme, &x, y, &xi);
        let norm = norm2(&x);
        if !(norm <= model.blowup_bound) {
            return Err(Divergence {
                step: k + 1,
                time: time + scheme.dt,
                norm,
                bound: model.blowup_bound,
                point: None,
            }
            .into());
        }
    }
    Ok(x)
}

/// N trajectory endpoints sharing one frozen driving realization; the
/// empirical surrogate for the pushed-forward measure at time `t`.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub t: f64,
    pub points: Vec<Vec<f64>>,
    pub driving: Arc<DrivingPath>,
}

impl EnsembleState {
    pub fn new(t: f64, points: Vec<Vec<f64>>, driving: Arc<DrivingPath>) -> Self {
        EnsembleState { t, points, driving }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn as_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.points.clone())
    }

    /// One row per point, coordinates only; header x0..x{d-1}.
    pub fn to_csv(&self) -> String {
        let dim = self.points.first().map(|p| p.len()).unwrap_or(0);
        let mut out = (0..dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for p in &self.points {
            let row = p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// Advances every ensemble point to time `t`; point i owns the Wiener stream
/// seeded by `w_seeds[i]` (all with counter epoch `epoch`), so the result is
/// independent of evaluation order and worker count.
pub fn evolve_ensemble(
    model: &SemilinearModel,
    scheme: &StepScheme,
    ens: &EnsembleState,
    t: f64,
    w_seeds: &[u64],
    epoch: f64,
) -> Result<EnsembleState, CoreError> {
    if w_seeds.len() != ens.len() {
        return Err(CoreError::invalid("w_seeds", "one seed per point required"));
    }
    let results: Vec<Result<Vec<f64>, CoreError>> = ens
        .points
        .par_iter()
        .zip(w_seeds.par_iter())
        .map(|(x0, seed)| {
            integrate(
                model,
                scheme,
                x0,
                ens.t,
                t,
                &ens.driving,
                &WienerStream::with_epoch(*seed, epoch),
            )
        })
        .collect();
    let mut points = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(x) => points.push(x),
            Err(CoreError::Divergence(mut d)) => {
                d.point = Some(i);
                return Err(d.into());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EnsembleState::new(t, points, ens.driving.clone()))
}

/// Draws `n` i.i.d. (over W) samples of X(t, s, x) under the single frozen
/// driving realization: the empirical transition kernel started at `x`.
pub fn sample_kernel(
    model: &SemilinearModel,
    scheme: &StepScheme,
    x: &[f64],
    s: f64,
    t: f64,
    driving: &DrivingPath,
    n: usize,
    seed: u64,
) -> Result<EmpiricalMeasure, CoreError> {
    if n == 0 {
        return Err(CoreError::invalid("n", "need at least one draw"));
    }
    let base = CounterRng::new(seed, StreamId::Auxiliary(1));
    let results: Vec<Result<Vec<f64>, CoreError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let w = WienerStream::new(base.derive_seed(i as u64, 0));
            integrate(model, scheme, x, s, t, driving, &w)
        })
        .collect();
    let mut points = Vec::with_capacity(n);
    for r in results {
        points.push(r?);
    }
    Ok(EmpiricalMeasure::uniform(points))
}
