//! The core experiments: pullback estimation of evolutionary systems of
//! measures, flow-property verification, Krylov-Bogoliubov averaging of the
//! enlarged process, asymptotic-strong-Feller diagnostics, Lyapunov and
//! stopping-time statistics, coupling-based mixing certificates, and the
//! small-ball irreducibility probe.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::driving::{sample_stationary, DrivingPath, HistoryWindow, OuSpec};
use crate::error::CoreError;
use crate::integrator::{
    evolve_ensemble, integrate, one_step_gaussian, sample_kernel, EnsembleState, SemilinearModel,
    StepScheme, WienerStream,
};
use crate::measures::{
    fit_mixing_rate, maximal_coupling_gaussian, wasserstein_pseudo, CouplingRun, EmpiricalMeasure,
    GaussianDiag, MixingFit, PseudoMetric,
};
use crate::rng::{CounterRng, StreamId};
use crate::stats::{self, norm2};

// ---------------------------------------------------------------------------
// Observables
// ---------------------------------------------------------------------------

/// A named bounded observable on state vectors.
#[derive(Clone)]
pub struct Observable {
    pub name: String,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl Observable {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Observable {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    /// sigmoid(x\[axis\] - shift); bounded in (0, 1).
    pub fn sigmoid(axis: usize, shift: f64) -> Self {
        Observable::new(format!("sigmoid(x{axis}-{shift})"), move |x: &[f64]| {
            1.0 / (1.0 + (-(x[axis] - shift)).exp())
        })
    }

    /// sigmoid(|x| - shift).
    pub fn sigmoid_norm(shift: f64) -> Self {
        Observable::new(format!("sigmoid(|x|-{shift})"), move |x: &[f64]| {
            1.0 / (1.0 + (-(norm2(x) - shift)).exp())
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Observable({})", self.name)
    }
}

/// A default family of bounded observables: coordinate sigmoids at a few
/// shifts, plus one on the norm.
pub fn default_observables(dim: usize, count: usize) -> Vec<Observable> {
    let mut obs = Vec::with_capacity(count);
    let shifts = [0.0, 1.0, -1.0, 0.5, -0.5];
    'outer: for &shift in &shifts {
        for axis in 0..dim {
            if obs.len() + 1 >= count {
                break 'outer;
            }
            obs.push(Observable::sigmoid(axis, shift));
        }
    }
    obs.push(Observable::sigmoid_norm(1.0));
    while obs.len() < count {
        obs.push(Observable::sigmoid_norm(obs.len() as f64 * 0.25));
    }
    obs
}

// ---------------------------------------------------------------------------
// Pullback estimation of the evolutionary system of measures
// ---------------------------------------------------------------------------

/// Estimate of the measures (mu_t) under one frozen driving realization,
/// obtained by pulling the start time back along `pullback_starts`.
#[derive(Debug, Clone)]
pub struct EvoSystemEstimate {
    pub times: Vec<f64>,
    pub measures: Vec<EmpiricalMeasure>,
    pub driving: Arc<DrivingPath>,
    pub pullback_starts: Vec<f64>,
    /// W_{d_1} gap between consecutive pullback depths, per time.
    pub gaps: Vec<Vec<f64>>,
    pub converged: bool,
    pub tolerance: f64,
}

/// Initial spread: `n_starts - 1` directions on the sphere of radius `rho`
/// plus the origin.
fn initial_starts(dim: usize, rho: f64, n_starts: usize, seed: u64) -> Vec<Vec<f64>> {
    let rng = CounterRng::new(seed, StreamId::Auxiliary(10));
    let mut starts = vec![vec![0.0; dim]];
    for j in 0..n_starts.saturating_sub(1) {
        let mut dir: Vec<f64> = (0..dim).map(|l| rng.normal(j as u64, l as u64)).collect();
        let n = norm2(&dir).max(1e-12);
        dir.iter_mut().for_each(|v| *v *= rho / n);
        starts.push(dir);
    }
    starts
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_evo_system(
    model: &SemilinearModel,
    scheme: &StepScheme,
    driving: Arc<DrivingPath>,
    s_list: &[f64],
    t_grid: &[f64],
    n_points: usize,
    rho: f64,
    tolerance: f64,
    seed: u64,
) -> Result<EvoSystemEstimate, CoreError> {
    if s_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CoreError::invalid("s_list", "must be strictly decreasing"));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::invalid("t_grid", "must be strictly increasing"));
    }
    if t_grid[0] < s_list[0] {
        return Err(CoreError::invalid("t_grid", "must start at or after the first pullback start"));
    }
    driving.check_covers(*s_list.last().unwrap(), *t_grid.last().unwrap())?;
    let starts = initial_starts(model.dim_h, rho, 9, seed);
    let seeder = CounterRng::new(seed, StreamId::Auxiliary(11));
    // one Wiener seed per point, shared across pullback depths: consecutive
    // estimates then differ only through the start time
    let w_seeds: Vec<u64> = (0..n_points).map(|i| seeder.derive_seed(i as u64, 0)).collect();
    let mut previous: Option<Vec<EmpiricalMeasure>> = None;
    let mut gaps: Vec<Vec<f64>> = Vec::new();
    let mut measures: Vec<EmpiricalMeasure> = Vec::new();
    for &s in s_list {
        let points: Vec<Vec<f64>> = (0..n_points)
            .map(|i| starts[i % starts.len()].clone())
            .collect();
        let mut ens = EnsembleState::new(s, points, driving.clone());
        let mut snapshots = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            ens = evolve_ensemble(model, scheme, &ens, t, &w_seeds, 0.0)?;
            snapshots.push(ens.as_measure());
        }
        if let Some(prev) = &previous {
            let d1 = PseudoMetric::new(1);
            let m = n_points.min(512);
            let gap_row: Vec<f64> = prev
                .iter()
                .zip(&snapshots)
                .map(|(a, b)| {
                    let (ra, rb) = if n_points > 512 {
                        (a.resample(m, seed ^ 0x5151), b.resample(m, seed ^ 0x5151))
                    } else {
                        (a.clone(), b.clone())
                    };
                    wasserstein_pseudo(&ra, &rb, &d1).unwrap_or(1.0)
                })
                .collect();
            gaps.push(gap_row);
        }
        previous = Some(snapshots.clone());
        measures = snapshots;
    }
    let converged = gaps
        .last()
        .map(|row| row.iter().all(|g| *g <= tolerance))
        .unwrap_or(false);
    Ok(EvoSystemEstimate {
        times: t_grid.to_vec(),
        measures,
        driving,
        pullback_starts: s_list.to_vec(),
        gaps,
        converged,
        tolerance,
    })
}

// ---------------------------------------------------------------------------
// Flow property
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FlowTriple {
    pub s: f64,
    pub t: f64,
    pub observable: String,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowReport {
    pub triples: Vec<FlowTriple>,
    pub pass_fraction: f64,
    pub max_z: f64,
    pub pass: bool,
}

/// Verifies the flow law: pushing the estimate at s forward with fresh
/// Wiener noise under the same driving realization reproduces the estimate
/// at t, within Monte Carlo error, for >= 95% of (s, t, observable) triples.
pub fn check_flow_property(
    est: &EvoSystemEstimate,
    model: &SemilinearModel,
    scheme: &StepScheme,
    observables: &[Observable],
    seed: u64,
) -> Result<FlowReport, CoreError> {
    check_flow_property_against(est, model, scheme, observables, est.driving.clone(), seed)
}

/// Same check with an explicit pushforward driving realization; passing a
/// mismatched realization is the negative control (the flow law must fail).
pub fn check_flow_property_against(
    est: &EvoSystemEstimate,
    model: &SemilinearModel,
    scheme: &StepScheme,
    observables: &[Observable],
    push_driving: Arc<DrivingPath>,
    seed: u64,
) -> Result<FlowReport, CoreError> {
    let seeder = CounterRng::new(seed, StreamId::Auxiliary(12));
    let mut triples = Vec::new();
    for i in 0..est.times.len() {
        for j in (i + 1)..est.times.len() {
            let s = est.times[i];
            let t = est.times[j];
            let n = est.measures[i].len();
            let fresh: Vec<u64> = (0..n)
                .map(|p| seeder.derive_seed((i * est.times.len() + j) as u64, p as u64))
                .collect();
            let ens = EnsembleState::new(s, est.measures[i].points.clone(), push_driving.clone());
            let pushed = evolve_ensemble(model, scheme, &ens, t, &fresh, 0.0)?.as_measure();
            let target = &est.measures[j];
            for obs in observables {
                let a: Vec<f64> = pushed.points.iter().map(|p| obs.eval(p)).collect();
                let b: Vec<f64> = target.points.iter().map(|p| obs.eval(p)).collect();
                let se = (stats::std_error(&a).powi(2) + stats::std_error(&b).powi(2)).sqrt();
                let z = (stats::mean(&a) - stats::mean(&b)).abs() / se.max(1e-300);
                triples.push(FlowTriple {
                    s,
                    t,
                    observable: obs.name.clone(),
                    z,
                    pass: z <= 3.0,
                });
            }
        }
    }
    let ok = triples.iter().filter(|t| t.pass).count();
    let pass_fraction = ok as f64 / triples.len().max(1) as f64;
    let max_z = triples.iter().map(|t| t.z).fold(0.0, f64::max);
    Ok(FlowReport {
        triples,
        pass_fraction,
        max_z,
        pass: pass_fraction >= 0.95,
    })
}

// ---------------------------------------------------------------------------
// Krylov-Bogoliubov averaging of the enlarged process
// ---------------------------------------------------------------------------

/// One sample of the enlarged process Z = (state, driver history window).
#[derive(Debug, Clone)]
pub struct ZSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub window: HistoryWindow,
}

impl ZSample {
    /// Concatenated (state, head-of-history) vector for observables.
    pub fn augmented(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        v.extend_from_slice(self.window.head());
        v
    }
}

/// Time-averaged samples of Z along one long trajectory with stationary
/// driving: the empirical invariant measure of the enlarged process.
#[allow(clippy::too_many_arguments)]
pub fn krylov_bogoliubov(
    model: &SemilinearModel,
    scheme: &StepScheme,
    driving_spec: &OuSpec,
    t_hist: f64,
    t_max: f64,
    burn_in: f64,
    thin: f64,
    seed: u64,
) -> Result<Vec<ZSample>, CoreError> {
    if t_max <= burn_in {
        return Err(CoreError::invalid("t_max", "must exceed burn_in"));
    }
    let seeder = CounterRng::new(seed, StreamId::Auxiliary(13));
    let mut path = DrivingPath::stationary(
        driving_spec.clone(),
        t_hist,
        scheme.dt,
        seeder.derive_seed(0, 0),
    )?;
    let w = WienerStream::new(seeder.derive_seed(0, 1));
    let mut x = vec![0.0; model.dim_h];
    let mut t = 0.0;
    let mut samples = Vec::new();
    let n_blocks = (t_max / thin).round() as usize;
    for _ in 0..n_blocks {
        // extend the driver first so the integration interval is covered
        let next = path.advance(thin)?;
        x = integrate(model, scheme, &x, t, t + thin, &next, &w)?;
        t += thin;
        path = next;
        if t > burn_in {
            samples.push(ZSample {
                t,
                x: x.clone(),
                window: path.window.clone(),
            });
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub observables: Vec<String>,
    pub z_scores: Vec<f64>,
    pub max_z: f64,
    pub pass: bool,
}

/// Invariance check: evolving every Z-sample by `delta` with fresh noise
/// (both Wiener and driver continuation) must leave observable means
/// unchanged. Paired differences with batch-mean standard errors absorb the
/// autocorrelation of the time-averaged samples.
pub fn kb_invariance_check(
    model: &SemilinearModel,
    scheme: &StepScheme,
    driving_spec: &OuSpec,
    samples: &[ZSample],
    delta: f64,
    observables: &[Observable],
    seed: u64,
) -> Result<InvarianceReport, CoreError> {
    if samples.len() < 32 {
        return Err(CoreError::InsufficientData {
            need: 32,
            got: samples.len(),
        });
    }
    let seeder = CounterRng::new(seed, StreamId::Auxiliary(14));
    let evolved: Vec<Result<ZSample, CoreError>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let fresh_v = seeder.derive_seed(i as u64, 0);
            let fresh_w = seeder.derive_seed(i as u64, 1);
            let path = DrivingPath {
                spec: driving_spec.clone(),
                seed: fresh_v,
                t_origin: z.t,
                window: z.window.clone(),
            };
            let cont = path.advance_seeded(delta, fresh_v)?;
            let x = integrate(
                model,
                scheme,
                &z.x,
                z.t,
                z.t + delta,
                &cont,
                &WienerStream::new(fresh_w),
            )?;
            Ok(ZSample {
                t: z.t + delta,
                x,
                window: cont.window,
            })
        })
        .collect();
    let mut pairs = Vec::with_capacity(samples.len());
    for (z, e) in samples.iter().zip(evolved) {
        pairs.push((z.augmented(), e?.augmented()));
    }
    let mut names = Vec::new();
    let mut zs = Vec::new();
    for obs in observables {
        let diffs: Vec<f64> = pairs
            .iter()
            .map(|(before, after)| obs.eval(after) - obs.eval(before))
            .collect();
        let se = stats::batch_std_error(&diffs, 16).max(1e-300);
        names.push(obs.name.clone());
        zs.push(stats::mean(&diffs).abs() / se);
    }
    let max_z = zs.iter().cloned().fold(0.0, f64::max);
    Ok(InvarianceReport {
        observables: names,
        z_scores: zs.clone(),
        max_z,
        pass: zs.iter().all(|z| *z <= 3.0),
    })
}

// ---------------------------------------------------------------------------
// Asymptotic strong Feller diagnostic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AsfTable {
    pub gammas: Vec<f64>,
    pub metric_ns: Vec<u32>,
    pub horizons: Vec<f64>,
    /// value\[gi\]\[ni\]\[ti\] = mean over driving realizations of
    /// sup_probe W_{d_n}(kernel(x), kernel(y)).
    pub value: Vec<Vec<Vec<f64>>>,
    pub se: Vec<Vec<Vec<f64>>>,
    /// Entries shrink toward zero as gamma does, at the largest (n, t).
    pub verdict: bool,
}

/// Probes the smoothing-at-infinity pattern: the expected worst
/// pseudo-metric Wasserstein distance between kernels started gamma apart,
/// as the ball shrinks and (n, t) grow. The supremum over the ball is
/// approximated from below by axis-antipodal probes plus random directions;
/// kernel clouds share Wiener seeds so the estimate is exact at gamma = 0.
#[allow(clippy::too_many_arguments)]
pub fn asf_diagnostic(
    model: &SemilinearModel,
    scheme: &StepScheme,
    x: &[f64],
    gammas: &[f64],
    metric_ns: &[u32],
    horizons: &[f64],
    drivings: &[Arc<DrivingPath>],
    m_kernel: usize,
    n_probes: usize,
    seed: u64,
) -> Result<AsfTable, CoreError> {
    if n_probes < 2 * model.dim_h {
        return Err(CoreError::invalid(
            "n_probes",
            format!("need at least 2 dim = {}", 2 * model.dim_h),
        ));
    }
    if m_kernel > 512 {
        return Err(CoreError::invalid("m_kernel", "exact assignment caps at 512"));
    }
    if gammas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CoreError::invalid(
            "gammas",
            "must be strictly decreasing (the verdict reads the shrinking-ball limit)",
        ));
    }
    let max_t = horizons.iter().cloned().fold(0.0, f64::max);
    for d in drivings {
        d.check_covers(d.t_min(), d.t_min() + max_t)?;
    }
    let dirs = probe_directions(model.dim_h, n_probes, seed);
    let mut value = vec![vec![vec![0.0; horizons.len()]; metric_ns.len()]; gammas.len()];
    let mut se = value.clone();
    // per driving realization and probe, sample both kernels with common
    // Wiener seeds, then take the probe supremum
    for (gi, &gamma) in gammas.iter().enumerate() {
        let per_omega: Vec<Vec<Vec<f64>>> = drivings
            .par_iter()
            .enumerate()
            .map(|(wi, path)| {
                let s = path.t_min();
                let mut sup = vec![vec![0.0; horizons.len()]; metric_ns.len()];
                for (ti, &t) in horizons.iter().enumerate() {
                    let ks = seed ^ ((wi as u64) << 8);
                    let cx = sample_kernel(model, scheme, x, s, s + t, path, m_kernel, ks)?;
                    for dir in &dirs {
                        let y: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + gamma * d).collect();
                        let cy = sample_kernel(model, scheme, &y, s, s + t, path, m_kernel, ks)?;
                        for (ni, &n) in metric_ns.iter().enumerate() {
                            let w = wasserstein_pseudo(&cx, &cy, &PseudoMetric::new(n))?;
                            if w > sup[ni][ti] {
                                sup[ni][ti] = w;
                            }
                        }
                    }
                }
                Ok(sup)
            })
            .collect::<Result<_, CoreError>>()?;
        for ni in 0..metric_ns.len() {
            for ti in 0..horizons.len() {
                let vals: Vec<f64> = per_omega.iter().map(|s| s[ni][ti]).collect();
                value[gi][ni][ti] = stats::mean(&vals);
                se[gi][ni][ti] = if vals.len() > 1 { stats::std_error(&vals) } else { 0.0 };
            }
        }
    }
    // verdict at the largest (n, t): entries decrease as gamma shrinks and
    // the smallest-gamma entry is small
    let ni = metric_ns.len() - 1;
    let ti = horizons.len() - 1;
    let mut decreasing = true;
    for gi in 1..gammas.len() {
        // gammas are expected in decreasing order
        let slack = 3.0 * (se[gi - 1][ni][ti] + se[gi][ni][ti]);
        if value[gi][ni][ti] > value[gi - 1][ni][ti] + slack {
            decreasing = false;
        }
    }
    let smallest = value[gammas.len() - 1][ni][ti];
    let verdict = decreasing && smallest <= 0.05 + 3.0 * se[gammas.len() - 1][ni][ti];
    Ok(AsfTable {
        gammas: gammas.to_vec(),
        metric_ns: metric_ns.to_vec(),
        horizons: horizons.to_vec(),
        value,
        se,
        verdict,
    })
}

fn probe_directions(dim: usize, n_probes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(n_probes);
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        dirs.push(e.clone());
        e[i] = -1.0;
        dirs.push(e);
    }
    let rng = CounterRng::new(seed, StreamId::Auxiliary(15));
    while dirs.len() < n_probes {
        let mut d: Vec<f64> = (0..dim)
            .map(|l| rng.normal(dirs.len() as u64, l as u64))
            .collect();
        let n = norm2(&d).max(1e-12);
        d.iter_mut().for_each(|v| *v /= n);
        dirs.push(d);
    }
    dirs
}

// ---------------------------------------------------------------------------
// Lyapunov structure and stopping-time statistics
// ---------------------------------------------------------------------------

/// Constants of the discrete drift condition
/// E(V_{k+1} | F_k) <= e^{-kappa5 T} V_k + kappa4 for
/// V = |X|^2 + delta |Y|^2.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LyapunovConstants {
    pub lambda1: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
    pub kappa5: f64,
    pub delta: f64,
}

pub fn lyapunov_constants(
    model: &SemilinearModel,
    driver: &OuSpec,
    t_block: f64,
) -> Result<LyapunovConstants, CoreError> {
    let growth = model
        .growth
        .ok_or_else(|| CoreError::invalid("growth", "model carries no growth bound"))?;
    let lambda1 = model.lambda1();
    if lambda1 <= 0.0 {
        return Err(CoreError::invalid("a_eigs", "need strictly negative spectrum"));
    }
    let kappa1 = 2.0 * driver.drift_eigs.iter().map(|b| -b).fold(f64::INFINITY, f64::min);
    let kappa2 = driver.total_stationary_variance();
    let kappa3 = growth.kappa3;
    let kappa5 = lambda1.min(kappa1 / 2.0);
    let alpha = (-kappa5 * t_block).exp() - (-kappa1 * t_block).exp();
    let delta = 2.0 * kappa3 / (alpha * (kappa1 + lambda1));
    let kappa4 = 2.0 * kappa3 / lambda1 + 2.0 * kappa2 * kappa3 / lambda1 + delta * kappa2;
    Ok(LyapunovConstants {
        lambda1,
        kappa1,
        kappa2,
        kappa3,
        kappa4,
        kappa5,
        delta,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    pub constants: LyapunovConstants,
    pub kappa1_fit: f64,
    pub kappa2_fit: f64,
    /// Binned conditional-drift audit: (mean V_k, mean V_{k+1}, bound, z).
    pub drift_bins: Vec<(f64, f64, f64, f64)>,
    pub drift_max_z: f64,
    pub drift_pass: bool,
    /// Exceedance of the small-set entry time: (k T, P(tau >= k T)).
    pub tail: Vec<(f64, f64)>,
    pub tail_fit: Option<MixingFit>,
    pub tail_pass: bool,
    pub threshold: f64,
}

/// Recovers the driver's Lyapunov pair (kappa1, kappa2) by regression on
/// exact OU transitions, then audits the conditional contraction of
/// V = |X|^2 + delta |Y|^2 and the exponential tail of the small-set entry
/// time tau.
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_audit(
    model: &SemilinearModel,
    scheme: &StepScheme,
    driver: &OuSpec,
    t_block: f64,
    m_small: f64,
    n_paths: usize,
    k_blocks: usize,
    x0: &[f64],
    seed: u64,
) -> Result<LyapunovReport, CoreError> {
    let constants = lyapunov_constants(model, driver, t_block)?;
    // --- driver pair recovery from exact transitions
    let n_fit = 200_000;
    let aux = CounterRng::new(seed, StreamId::Auxiliary(16));
    let mut v0 = Vec::with_capacity(n_fit);
    let mut v1 = Vec::with_capacity(n_fit);
    for i in 0..n_fit {
        let y0 = sample_stationary(driver, aux.derive_seed(i as u64, 0));
        let noise: Vec<f64> = (0..driver.dim)
            .map(|l| aux.normal(i as u64, 1000 + l as u64))
            .collect();
        let y1 = crate::driving::ou_step(driver, &y0, t_block, &noise);
        v0.push(y0.iter().map(|v| v * v).sum::<f64>());
        v1.push(y1.iter().map(|v| v * v).sum::<f64>());
    }
    let fit = stats::linear_fit(&v0, &v1);
    let kappa1_fit = -fit.slope.ln() / t_block;
    let kappa2_fit = fit.intercept / (1.0 - fit.slope);

    // --- trajectory blocks
    let horizon = k_blocks as f64 * t_block;
    let threshold = m_small * constants.kappa4;
    let runs: Vec<Result<Vec<f64>, CoreError>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let sd = aux.derive_seed(i as u64, 2);
            let wd = aux.derive_seed(i as u64, 3);
            let path = DrivingPath::stationary(driver.clone(), horizon, scheme.dt, sd)?
                .shift_time(horizon);
            let w = WienerStream::new(wd);
            let mut x = x0.to_vec();
            let mut vs = Vec::with_capacity(k_blocks + 1);
            let y0 = path.value_at(0.0);
            vs.push(sq_norm(&x) + constants.delta * sq_norm(y0));
            for k in 0..k_blocks {
                let t0 = k as f64 * t_block;
                let t1 = t0 + t_block;
                x = integrate(model, scheme, &x, t0, t1, &path, &w)?;
                let y = path.value_at(t1);
                vs.push(sq_norm(&x) + constants.delta * sq_norm(y));
            }
            Ok(vs)
        })
        .collect();
    let mut v_series = Vec::with_capacity(n_paths);
    for r in runs {
        v_series.push(r?);
    }

    // --- binned conditional-drift audit on pooled (V_k, V_{k+1})
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for vs in &v_series {
        for k in 0..k_blocks {
            pairs.push((vs[k], vs[k + 1]));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n_bins = 8;
    let mut drift_bins = Vec::new();
    let mut drift_max_z = f64::NEG_INFINITY;
    let rate = (-constants.kappa5 * t_block).exp();
    for b in 0..n_bins {
        let lo = b * pairs.len() / n_bins;
        let hi = ((b + 1) * pairs.len() / n_bins).min(pairs.len());
        if hi <= lo + 1 {
            continue;
        }
        let vk: Vec<f64> = pairs[lo..hi].iter().map(|p| p.0).collect();
        let vk1: Vec<f64> = pairs[lo..hi].iter().map(|p| p.1).collect();
        let bound = rate * stats::mean(&vk) + constants.kappa4;
        let se = stats::std_error(&vk1).max(1e-300);
        let z = (stats::mean(&vk1) - bound) / se;
        drift_max_z = drift_max_z.max(z);
        drift_bins.push((stats::mean(&vk), stats::mean(&vk1), bound, z));
    }
    let drift_pass = drift_max_z <= 3.0;

    // --- stopping-time tail
    let taus: Vec<usize> = v_series
        .iter()
        .map(|vs| vs.iter().position(|v| *v <= threshold).unwrap_or(k_blocks + 1))
        .collect();
    let tail: Vec<(f64, f64)> = (0..=k_blocks)
        .map(|k| {
            let p = taus.iter().filter(|tau| **tau >= k).count() as f64 / n_paths as f64;
            (k as f64 * t_block, p)
        })
        .collect();
    // fit the asymptotic regime: once the deterministic transient has
    // released the median, the exceedance decays geometrically
    let fit_points: Vec<(f64, f64)> = tail
        .iter()
        .cloned()
        .filter(|(_, p)| *p > 0.0 && *p <= 0.5)
        .collect();
    let tail_fit = if fit_points.len() >= 4 {
        let ts: Vec<f64> = fit_points.iter().map(|p| p.0).collect();
        let ps: Vec<f64> = fit_points.iter().map(|p| p.1).collect();
        fit_mixing_rate(&ts, &ps).ok()
    } else {
        None
    };
    let tail_pass = tail_fit
        .as_ref()
        .map(|f| f.rate > 0.0 && f.r_squared > 0.9)
        .unwrap_or(false);
    Ok(LyapunovReport {
        constants,
        kappa1_fit,
        kappa2_fit,
        drift_bins,
        drift_max_z,
        drift_pass,
        tail,
        tail_fit,
        tail_pass,
        threshold,
    })
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

// ---------------------------------------------------------------------------
// Mixing certificate by coupling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MixingParams {
    /// Attempt the one-step maximal coupling once the pair is this close.
    pub delta_couple: f64,
    /// Steps between attempts while close.
    pub attempt_every: usize,
    /// Wiener pairs per driving realization.
    pub n_pairs: usize,
}

impl Default for MixingParams {
    fn default() -> Self {
        MixingParams {
            delta_couple: 0.1,
            attempt_every: 1,
            n_pairs: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MixingCertificate {
    pub checkpoints: Vec<f64>,
    /// Mean over driving realizations of |P phi(x) - P phi(y)|.
    pub obs_curve: Vec<f64>,
    pub obs_se: Vec<f64>,
    /// Mean uncoupled fraction (pathwise nonincreasing).
    pub envelope: Vec<f64>,
    pub rate_fit: Option<MixingFit>,
    pub envelope_fit: Option<MixingFit>,
    /// Pairs that never came close enough to attempt a coupling.
    pub unattempted_fraction: f64,
    pub per_omega_obs: Vec<Vec<f64>>,
    /// Per-pair coupling times and the pooled uncoupled fractions.
    pub coupling_run: CouplingRun,
}

impl MixingCertificate {
    /// The observable-difference curve in the common plotting schema.
    pub fn curve_csv(&self) -> String {
        curve_csv(&self.checkpoints, &self.obs_curve, &self.obs_se)
    }
}

/// Standard curve serialization: columns (t, value, stderr).
pub fn curve_csv(t: &[f64], value: &[f64], stderr: &[f64]) -> String {
    let mut out = String::from("t,value,stderr\n");
    for i in 0..t.len() {
        out.push_str(&format!("{},{},{}\n", t[i], value[i], stderr[i]));
    }
    out
}

/// Runs the coupling schedule under many driving realizations: evolve the
/// pair synchronously (shared Wiener increments; the additive noise cancels
/// in the difference), attempt a one-step maximal coupling whenever the
/// states are `delta_couple`-close, and replay identical increments after
/// success. Returns the observable-difference curves and the uncoupled
/// envelope with log-linear rate fits.
#[allow(clippy::too_many_arguments)]
pub fn mixing_certificate(
    model: &SemilinearModel,
    scheme: &StepScheme,
    x: &[f64],
    y: &[f64],
    drivings: &[Arc<DrivingPath>],
    checkpoints: &[f64],
    params: &MixingParams,
    observable: &Observable,
    seed: u64,
) -> Result<MixingCertificate, CoreError> {
    let horizon = *checkpoints.last().ok_or_else(|| CoreError::invalid("checkpoints", "empty"))?;
    for d in drivings {
        d.check_covers(0.0, horizon)?;
    }
    let aux = CounterRng::new(seed, StreamId::Auxiliary(17));
    let outcomes: Vec<Result<(Vec<f64>, Vec<f64>, Vec<Option<f64>>, f64), CoreError>> = drivings
        .par_iter()
        .enumerate()
        .map(|(wi, path)| {
            let mut phi_x = vec![0.0; checkpoints.len()];
            let mut phi_y = vec![0.0; checkpoints.len()];
            let mut uncoupled = vec![0.0; checkpoints.len()];
            let mut unattempted = 0.0;
            let mut coupling_times = Vec::with_capacity(params.n_pairs);
            for j in 0..params.n_pairs {
                let pair_seed = aux.derive_seed((wi * params.n_pairs + j) as u64, 0);
                let out = simulate_pair(
                    model,
                    scheme,
                    x,
                    y,
                    path,
                    checkpoints,
                    params,
                    observable,
                    pair_seed,
                )?;
                for (c, (px, py)) in out.phi_x.iter().zip(&out.phi_y).enumerate() {
                    phi_x[c] += px;
                    phi_y[c] += py;
                    if out.coupled_at.map(|tc| tc > checkpoints[c]).unwrap_or(true) {
                        uncoupled[c] += 1.0;
                    }
                }
                if !out.attempted && out.coupled_at.is_none() {
                    unattempted += 1.0;
                }
                coupling_times.push(out.coupled_at);
            }
            let n = params.n_pairs as f64;
            let diff: Vec<f64> = phi_x
                .iter()
                .zip(&phi_y)
                .map(|(a, b)| ((a - b) / n).abs())
                .collect();
            let frac: Vec<f64> = uncoupled.iter().map(|u| u / n).collect();
            Ok((diff, frac, coupling_times, unattempted / n))
        })
        .collect();
    let mut per_omega_obs = Vec::with_capacity(drivings.len());
    let mut per_omega_env = Vec::with_capacity(drivings.len());
    let mut all_coupling_times = Vec::with_capacity(drivings.len() * params.n_pairs);
    let mut unattempted_total = 0.0;
    for o in outcomes {
        let (diff, frac, times, unatt) = o?;
        per_omega_obs.push(diff);
        per_omega_env.push(frac);
        all_coupling_times.extend(times);
        unattempted_total += unatt;
    }
    let n_omega = drivings.len();
    let mut obs_curve = Vec::with_capacity(checkpoints.len());
    let mut obs_se = Vec::with_capacity(checkpoints.len());
    let mut envelope = Vec::with_capacity(checkpoints.len());
    for c in 0..checkpoints.len() {
        let col: Vec<f64> = per_omega_obs.iter().map(|row| row[c]).collect();
        obs_curve.push(stats::mean(&col));
        obs_se.push(if n_omega > 1 { stats::std_error(&col) } else { 0.0 });
        let env: Vec<f64> = per_omega_env.iter().map(|row| row[c]).collect();
        envelope.push(stats::mean(&env));
    }
    let rate_fit = fit_mixing_rate(checkpoints, &obs_curve).ok();
    let mut coupling_run = CouplingRun::from_coupling_times(checkpoints, all_coupling_times);
    let envelope_fit = crate::measures::fit_run(&mut coupling_run).ok();
    Ok(MixingCertificate {
        checkpoints: checkpoints.to_vec(),
        obs_curve,
        obs_se,
        envelope,
        rate_fit,
        envelope_fit,
        unattempted_fraction: unattempted_total / n_omega as f64,
        per_omega_obs,
        coupling_run,
    })
}

struct PairOutcome {
    phi_x: Vec<f64>,
    phi_y: Vec<f64>,
    coupled_at: Option<f64>,
    attempted: bool,
}

#[allow(clippy::too_many_arguments)]
fn simulate_pair(
    model: &SemilinearModel,
    scheme: &StepScheme,
    x0: &[f64],
    y0: &[f64],
    driving: &DrivingPath,
    checkpoints: &[f64],
    params: &MixingParams,
    observable: &Observable,
    seed: u64,
) -> Result<PairOutcome, CoreError> {
    let dt = scheme.dt;
    let horizon = *checkpoints.last().unwrap();
    let n_steps = crate::driving::grid_steps(horizon, dt)?;
    let aux = CounterRng::new(seed, StreamId::Auxiliary(18));
    let w = WienerStream::new(aux.derive_seed(0, 0));
    let mut x1 = x0.to_vec();
    let mut x2 = y0.to_vec();
    let mut coupled_at: Option<f64> = None;
    let mut attempted = false;
    let mut phi_x = Vec::with_capacity(checkpoints.len());
    let mut phi_y = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0usize;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        if coupled_at.is_some() {
            // identical states, identical increments: evolve one copy
            x1 = integrate(model, scheme, &x1, t, t + dt, driving, &w)?;
            x2 = x1.clone();
        } else {
            let dist = x1
                .iter()
                .zip(&x2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let try_now = dist <= params.delta_couple && k as usize % params.attempt_every == 0;
            if try_now {
                attempted = true;
                let yv = driving.value_at(t);
                let (m1, s1) = one_step_gaussian(model, scheme, &x1, yv);
                let (m2, s2) = one_step_gaussian(model, scheme, &x2, yv);
                let p = GaussianDiag { mean: m1, std: s1 };
                let q = GaussianDiag { mean: m2, std: s2 };
                let (z1, z2, coupled) =
                    maximal_coupling_gaussian(&p, &q, aux.derive_seed(k + 1, 1));
                x1 = z1;
                x2 = z2;
                if coupled {
                    coupled_at = Some(t + dt);
                }
            } else {
                // synchronous phase: both consume the same increments
                x1 = integrate(model, scheme, &x1, t, t + dt, driving, &w)?;
                x2 = integrate(model, scheme, &x2, t, t + dt, driving, &w)?;
            }
        }
        while next_cp < checkpoints.len() && (t + dt) + 1e-9 * dt >= checkpoints[next_cp] {
            phi_x.push(observable.eval(&x1));
            phi_y.push(observable.eval(&x2));
            next_cp += 1;
        }
    }
    while next_cp < checkpoints.len() {
        phi_x.push(observable.eval(&x1));
        phi_y.push(observable.eval(&x2));
        next_cp += 1;
    }
    Ok(PairOutcome {
        phi_x,
        phi_y,
        coupled_at,
        attempted,
    })
}

// ---------------------------------------------------------------------------
// Small-ball irreducibility probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SmallBallReport {
    /// Blocks of length T after which the noiseless flow from the worst
    /// probe start on the rho1-sphere is inside delta1/2.
    pub k0: usize,
    /// Monte Carlo estimate of P(|X(K0 T)| <= delta1) with full noise.
    pub alpha_hat: f64,
    /// Wilson interval at 3 sigma.
    pub wilson: (f64, f64),
    pub worst_start_norm: f64,
}

/// Finds the deterministic return horizon K0 for the noiseless system, then
/// estimates the probability that the noisy system is delta1-small at K0 T.
/// Smallness is measured in the model's H norm. A Wilson interval excluding
/// zero is the irreducibility-toward-the-origin verdict.
#[allow(clippy::too_many_arguments)]
pub fn small_ball_probe(
    model: &SemilinearModel,
    scheme: &StepScheme,
    driver: &OuSpec,
    rho1: f64,
    delta1: f64,
    t_block: f64,
    n_paths: usize,
    n_probes: usize,
    k_cap: usize,
    seed: u64,
) -> Result<SmallBallReport, CoreError> {
    if !(rho1 > delta1 && delta1 > 0.0) {
        return Err(CoreError::invalid("rho1", "need rho1 > delta1 > 0"));
    }
    let det = model.deterministic_part();
    let dirs = probe_directions(model.dim_h, n_probes.max(2 * model.dim_h), seed);
    let zero_spec = OuSpec::new(vec![-1.0], vec![0.0])?;
    let cap_t = k_cap as f64 * t_block;
    let n_grid = (cap_t / scheme.dt).round() as usize;
    let zero_path = DrivingPath::from_samples(
        zero_spec,
        scheme.dt,
        cap_t,
        vec![vec![0.0]; n_grid + 1],
        0,
    )?;
    let mut k0 = 0usize;
    let mut worst = Vec::new();
    let mut worst_norm = -1.0;
    for dir in &dirs {
        // probe starts live on the rho1-sphere of the model's H norm
        let scale = rho1 / model.h_norm(dir).max(1e-300);
        let start: Vec<f64> = dir.iter().map(|d| scale * d).collect();
        let mut x = start.clone();
        let mut k = 0usize;
        while model.h_norm(&x) > delta1 / 2.0 {
            k += 1;
            if k > k_cap {
                return Err(CoreError::SearchCapExceeded(k_cap));
            }
            let t0 = (k - 1) as f64 * t_block;
            x = integrate(&det, scheme, &x, t0, t0 + t_block, &zero_path, &WienerStream::new(0))?;
        }
        if k > k0 || (k == k0 && model.h_norm(&start) > worst_norm) {
            k0 = k;
            worst = start.clone();
            worst_norm = model.h_norm(&start);
        }
    }
    let k0 = k0.max(1);
    let horizon = k0 as f64 * t_block;
    let aux = CounterRng::new(seed, StreamId::Auxiliary(19));
    let hits: usize = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let sd = aux.derive_seed(i as u64, 0);
            let wd = aux.derive_seed(i as u64, 1);
            let path = DrivingPath::stationary(driver.clone(), horizon, scheme.dt, sd)
                .expect("valid driver")
                .shift_time(horizon);
            let x = integrate(
                model,
                scheme,
                &worst,
                0.0,
                horizon,
                &path,
                &WienerStream::new(wd),
            );
            match x {
                Ok(x) => usize::from(model.h_norm(&x) <= delta1),
                Err(_) => 0,
            }
        })
        .sum();
    let alpha_hat = hits as f64 / n_paths as f64;
    let wilson = stats::wilson_interval(hits as u64, n_paths as u64, 3.0);
    Ok(SmallBallReport {
        k0,
        alpha_hat,
        wilson,
        worst_start_norm: worst_norm,
    })
}
