//! Empirical-measure machinery: total-variation and pseudo-metric
//! Wasserstein estimators, maximal couplings, and mixing-rate fits.

use serde::Serialize;

use crate::error::CoreError;
use crate::rng::{CounterRng, StreamId};
use crate::stats::{self, norm_cdf};

/// Weighted sample cloud.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, CoreError> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(CoreError::invalid("weights", "one weight per point, at least one point"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|w| *w < 0.0) {
            return Err(CoreError::invalid(
                "weights",
                format!("must be nonnegative and sum to 1 (sum = {total})"),
            ));
        }
        Ok(EmpiricalMeasure { points, weights })
    }

    /// Equal weights 1/M.
    pub fn uniform(points: Vec<Vec<f64>>) -> Self {
        let m = points.len();
        assert!(m >= 1, "empty cloud");
        EmpiricalMeasure {
            points,
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() < 1e-12 * (1.0 + w))
    }

    /// Values of coordinate `axis` across the cloud.
    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.points.iter().map(|p| p[axis]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for (p, w) in self.points.iter().zip(&self.weights) {
            for i in 0..d {
                m[i] += w * p[i];
            }
        }
        m
    }

    /// Weighted mean of an observable.
    pub fn expect(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * phi(p))
            .sum()
    }

    /// Downsamples to `m` equally weighted points (with replacement),
    /// deterministic given the seed. Used to feed the exact-assignment route.
    pub fn resample(&self, m: usize, seed: u64) -> EmpiricalMeasure {
        let rng = CounterRng::new(seed, StreamId::Auxiliary(2));
        let mut cum = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cum.push(acc);
        }
        let points = (0..m)
            .map(|i| {
                let u = rng.uniform(i as u64, 0) * acc;
                let j = cum.partition_point(|c| *c < u).min(self.len() - 1);
                self.points[j].clone()
            })
            .collect();
        EmpiricalMeasure::uniform(points)
    }
}

/// Bounded pseudo-metric d_n(x, y) = min(1, n |x - y|). The family increases
/// pointwise to 1 off the diagonal, so W_{d_n} increases to total variation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PseudoMetric {
    pub n: u32,
}

impl PseudoMetric {
    pub fn new(n: u32) -> Self {
        assert!(n >= 1);
        PseudoMetric { n }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (self.n as f64 * d2.sqrt()).min(1.0)
    }
}

// ---------------------------------------------------------------------------
// Total variation over a shared histogram
// ---------------------------------------------------------------------------

/// Joint histogram grid over up to three axes. Built on the pooled sample by
/// the Freedman-Diaconis rule, capped at `max_bins` per axis; higher
/// dimensions enter through the projection `axes`.
#[derive(Debug, Clone)]
pub struct Binning {
    pub axes: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
}

pub const DEFAULT_MAX_BINS: usize = 64;

impl Binning {
    /// Default construction: first min(3, dim) coordinates.
    pub fn freedman_diaconis(pool: &[&EmpiricalMeasure], max_bins: usize) -> Binning {
        let dim = pool[0].dim();
        let axes: Vec<usize> = (0..dim.min(3)).collect();
        Binning::freedman_diaconis_on_axes(pool, &axes, max_bins)
    }

    pub fn freedman_diaconis_on_axes(
        pool: &[&EmpiricalMeasure],
        axes: &[usize],
        max_bins: usize,
    ) -> Binning {
        assert!(!axes.is_empty() && axes.len() <= 3, "joint binning is limited to 3 axes");
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut bins = Vec::new();
        let n_total: usize = pool.iter().map(|m| m.len()).sum();
        for &ax in axes {
            let mut vals: Vec<f64> = pool.iter().flat_map(|m| m.component(ax)).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |p: f64| vals[((vals.len() - 1) as f64 * p).round() as usize];
            let iqr = q(0.75) - q(0.25);
            let vmin = vals[0];
            let vmax = vals[vals.len() - 1];
            let span = (vmax - vmin).max(1e-300);
            let width = 2.0 * iqr / (n_total as f64).cbrt();
            let nb = if width > 0.0 {
                ((span / width).ceil() as usize).clamp(1, max_bins)
            } else {
                1
            };
            let pad = 1e-9 * span;
            lo.push(vmin - pad);
            hi.push(vmax + pad);
            bins.push(nb);
        }
        Binning {
            axes: axes.to_vec(),
            lo,
            hi,
            bins,
        }
    }

    /// Explicit grid.
    pub fn explicit(axes: Vec<usize>, lo: Vec<f64>, hi: Vec<f64>, bins: Vec<usize>) -> Binning {
        Binning { axes, lo, hi, bins }
    }

    fn n_cells(&self) -> usize {
        self.bins.iter().product()
    }

    /// Flat cell index, or None when the point falls outside the grid.
    fn cell_of(&self, p: &[f64]) -> Option<usize> {
        let mut idx = 0usize;
        for (j, &ax) in self.axes.iter().enumerate() {
            let x = p[ax];
            if x < self.lo[j] || x > self.hi[j] {
                return None;
            }
            let f = (x - self.lo[j]) / (self.hi[j] - self.lo[j]);
            let b = ((f * self.bins[j] as f64) as usize).min(self.bins[j] - 1);
            idx = idx * self.bins[j] + b;
        }
        Some(idx)
    }

    fn histogram(&self, m: &EmpiricalMeasure) -> (Vec<f64>, f64) {
        let mut h = vec![0.0; self.n_cells()];
        let mut outside = 0.0;
        for (p, w) in m.points.iter().zip(&m.weights) {
            match self.cell_of(p) {
                Some(c) => h[c] += w,
                None => outside += w,
            }
        }
        (h, outside)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TvEstimate {
    pub value: f64,
    /// Largest fraction of either measure falling outside the grid; above 1%
    /// the estimate is suspect.
    pub outside_mass: f64,
}

impl TvEstimate {
    pub fn coverage_ok(&self) -> bool {
        self.outside_mass <= 0.01
    }
}

/// Histogram total-variation estimate: half the L1 distance between binned
/// masses, with mass outside the grid kept in a dedicated overflow cell.
pub fn tv_distance_report(p: &EmpiricalMeasure, q: &EmpiricalMeasure, binning: &Binning) -> TvEstimate {
    let (hp, outp) = binning.histogram(p);
    let (hq, outq) = binning.histogram(q);
    let mut l1: f64 = hp.iter().zip(&hq).map(|(a, b)| (a - b).abs()).sum();
    l1 += (outp - outq).abs();
    TvEstimate {
        value: 0.5 * l1,
        outside_mass: outp.max(outq),
    }
}

pub fn tv_distance(p: &EmpiricalMeasure, q: &EmpiricalMeasure, binning: &Binning) -> f64 {
    tv_distance_report(p, q, binning).value
}

/// Closed-form total variation of two Gaussians with a common diagonal
/// covariance: 2 Phi(|S^{-1/2}(m1 - m2)|/2) - 1.
pub fn gaussian_tv_equal_cov(mean1: &[f64], mean2: &[f64], std: &[f64]) -> f64 {
    let z2: f64 = mean1
        .iter()
        .zip(mean2)
        .zip(std)
        .map(|((a, b), s)| {
            let d = (a - b) / s;
            d * d
        })
        .sum();
    2.0 * norm_cdf(z2.sqrt() / 2.0) - 1.0
}

// ---------------------------------------------------------------------------
// Pseudo-metric Wasserstein
// ---------------------------------------------------------------------------

/// Largest cloud size routed to the exact assignment solver.
pub const EXACT_ASSIGNMENT_CAP: usize = 512;

/// Optimal-transport cost under the bounded pseudo-metric `d`. Equal-weight
/// clouds up to [`EXACT_ASSIGNMENT_CAP`] points are solved exactly by
/// assignment; anything larger falls back to an entropic approximation.
pub fn wasserstein_pseudo(
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    d: &PseudoMetric,
) -> Result<f64, CoreError> {
    let exact_route = p.len().max(q.len()) <= EXACT_ASSIGNMENT_CAP && p.is_uniform() && q.is_uniform();
    if exact_route {
        if p.len() != q.len() {
            return Err(CoreError::SizeMismatch(p.len(), q.len()));
        }
        let cost: Vec<Vec<f64>> = p
            .points
            .iter()
            .map(|a| q.points.iter().map(|b| d.eval(a, b)).collect())
            .collect();
        let (_, total) = min_cost_assignment(&cost);
        Ok(total / p.len() as f64)
    } else {
        Ok(sinkhorn_cost(p, q, d, 0.01, 4000, 1e-9))
    }
}

/// Exact minimum-cost perfect assignment on a square cost matrix
/// (Kuhn-Munkres with potentials, O(n^3)). Returns (row assigned to each
/// column, total cost).
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    assert!(n > 0 && cost.iter().all(|r| r.len() == n), "square matrix");
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let assignment: Vec<usize> = (1..=n).map(|j| p[j] - 1).collect();
    let total = assignment
        .iter()
        .enumerate()
        .map(|(j, &i)| cost[i][j])
        .sum();
    (assignment, total)
}

/// Entropic optimal transport (log-domain Sinkhorn); returns the transport
/// cost of the regularized plan. Slightly biased upward at this epsilon,
/// which is acceptable for the large clouds it serves.
pub fn sinkhorn_cost(
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    d: &PseudoMetric,
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> f64 {
    let np = p.len();
    let nq = q.len();
    let cost: Vec<f64> = p
        .points
        .iter()
        .flat_map(|a| q.points.iter().map(move |b| d.eval(a, b)))
        .collect();
    let log_a: Vec<f64> = p.weights.iter().map(|w| w.max(1e-300).ln()).collect();
    let log_b: Vec<f64> = q.weights.iter().map(|w| w.max(1e-300).ln()).collect();
    let mut f = vec![0.0; np];
    let mut g = vec![0.0; nq];
    let lse = |terms: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = terms.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m.is_infinite() {
            return m;
        }
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    for _ in 0..max_iter {
        for i in 0..np {
            let s = lse(&mut (0..nq).map(|j| (g[j] - cost[i * nq + j]) / eps + log_b[j]));
            f[i] = -eps * s;
        }
        let mut err: f64 = 0.0;
        for j in 0..nq {
            let s = lse(&mut (0..np).map(|i| (f[i] - cost[i * nq + j]) / eps + log_a[i]));
            let new_g = -eps * s;
            err = err.max((new_g - g[j]).abs());
            g[j] = new_g;
        }
        if err < tol {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..np {
        for j in 0..nq {
            let logp = (f[i] + g[j] - cost[i * nq + j]) / eps + log_a[i] + log_b[j];
            total += logp.exp() * cost[i * nq + j];
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Maximal coupling
// ---------------------------------------------------------------------------

/// Diagonal Gaussian, the one-step kernel shape of the additive-noise models.
#[derive(Debug, Clone)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianDiag {
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((m, sd), xi) in self.mean.iter().zip(&self.std).zip(x) {
            let z = (xi - m) / sd;
            s += -0.5 * z * z - sd.ln();
        }
        s - 0.5 * (self.mean.len() as f64) * (2.0 * std::f64::consts::PI).ln()
    }

    fn sample(&self, rng: &CounterRng, step: u64, lane_base: u64) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .enumerate()
            .map(|(k, (m, sd))| m + sd * rng.normal(step, lane_base + k as u64))
            .collect()
    }
}

/// Draws one pair (X, Y) with marginals p and q such that
/// P(X != Y) = TV(p, q) exactly: accept from the overlap with probability
/// 1 - TV, otherwise draw the second marginal from the residual.
pub fn maximal_coupling_gaussian(
    p: &GaussianDiag,
    q: &GaussianDiag,
    seed: u64,
) -> (Vec<f64>, Vec<f64>, bool) {
    let rng = CounterRng::new(seed, StreamId::Auxiliary(3));
    let x = p.sample(&rng, 0, 1);
    let u = rng.uniform(0, 0);
    if u.ln() + p.log_pdf(&x) <= q.log_pdf(&x) {
        return (x.clone(), x, true);
    }
    // residual of q against p
    for attempt in 1..10_000u64 {
        let y = q.sample(&rng, attempt, 1);
        let w = rng.uniform(attempt, 0);
        if w.ln() + q.log_pdf(&y) > p.log_pdf(&y) {
            return (x, y, false);
        }
    }
    // unreachable in practice unless p == q to machine precision
    let y = q.sample(&rng, 10_000, 1);
    (x, y, false)
}

/// Maximal coupling of two discrete distributions sharing one atom list.
/// Returns the sampled atom indices and the coupling flag.
pub fn maximal_coupling_discrete(
    wp: &[f64],
    wq: &[f64],
    seed: u64,
) -> (usize, usize, bool) {
    assert_eq!(wp.len(), wq.len(), "shared support required");
    let rng = CounterRng::new(seed, StreamId::Auxiliary(3));
    let overlap: f64 = wp.iter().zip(wq).map(|(a, b)| a.min(*b)).sum();
    let u = rng.uniform(0, 0);
    let draw = |weights: &mut dyn Iterator<Item = f64>, target: f64| -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, w) in weights.enumerate() {
            acc += w;
            last = i;
            if target < acc {
                return i;
            }
        }
        last
    };
    if u < overlap {
        let i = draw(&mut wp.iter().zip(wq).map(|(a, b)| a.min(*b)), u);
        (i, i, true)
    } else {
        let up = rng.uniform(0, 1) * (1.0 - overlap);
        let uq = rng.uniform(0, 2) * (1.0 - overlap);
        let i = draw(&mut wp.iter().zip(wq).map(|(a, b)| (a - b).max(0.0)), up);
        let j = draw(&mut wp.iter().zip(wq).map(|(a, b)| (b - a).max(0.0)), uq);
        (i, j, false)
    }
}

/// Empirical uncoupled fraction of the Gaussian maximal coupling over `n`
/// independent draws.
pub fn uncoupled_fraction_gaussian(p: &GaussianDiag, q: &GaussianDiag, n: usize, seed: u64) -> f64 {
    let base = CounterRng::new(seed, StreamId::Auxiliary(4));
    let mut uncoupled = 0usize;
    for i in 0..n {
        let (_, _, coupled) = maximal_coupling_gaussian(p, q, base.derive_seed(i as u64, 0));
        if !coupled {
            uncoupled += 1;
        }
    }
    uncoupled as f64 / n as f64
}

// ---------------------------------------------------------------------------
// Coupling runs and mixing-rate fits
// ---------------------------------------------------------------------------

/// Record of a paired-trajectory experiment: per-pair coupling times and the
/// uncoupled fraction at each checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct CouplingRun {
    pub times: Vec<f64>,
    pub uncoupled_fraction: Vec<f64>,
    pub coupling_times: Vec<Option<f64>>,
    pub fitted_rate: Option<f64>,
}

impl CouplingRun {
    pub fn from_coupling_times(checkpoints: &[f64], coupling_times: Vec<Option<f64>>) -> Self {
        let n = coupling_times.len().max(1) as f64;
        let fractions = checkpoints
            .iter()
            .map(|&t| {
                coupling_times
                    .iter()
                    .filter(|ct| match ct {
                        Some(c) => *c > t,
                        None => true,
                    })
                    .count() as f64
                    / n
            })
            .collect();
        CouplingRun {
            times: checkpoints.to_vec(),
            uncoupled_fraction: fractions,
            coupling_times,
            fitted_rate: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,uncoupled_fraction\n");
        for (t, f) in self.times.iter().zip(&self.uncoupled_fraction) {
            s.push_str(&format!("{t},{f}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MixingFit {
    /// Prefactor: exp(intercept) of the log-linear fit.
    pub c: f64,
    /// Positive rate is the mixing verdict; infinite marks instant coupling.
    pub rate: f64,
    pub rate_se: f64,
    pub r_squared: f64,
}

/// Least-squares fit of log(fraction) against time over the checkpoints with
/// nonzero fraction.
pub fn fit_mixing_rate(times: &[f64], fractions: &[f64]) -> Result<MixingFit, CoreError> {
    assert_eq!(times.len(), fractions.len());
    let positive: Vec<(f64, f64)> = times
        .iter()
        .zip(fractions)
        .filter(|(_, f)| **f > 0.0)
        .map(|(t, f)| (*t, *f))
        .collect();
    if fractions.iter().skip(1).all(|f| *f == 0.0) {
        // everything coupled by the second checkpoint: infinitely fast
        return Ok(MixingFit {
            c: fractions.first().copied().unwrap_or(0.0),
            rate: f64::INFINITY,
            rate_se: 0.0,
            r_squared: 1.0,
        });
    }
    if positive.len() < 4 {
        return Err(CoreError::InsufficientData {
            need: 4,
            got: positive.len(),
        });
    }
    let xs: Vec<f64> = positive.iter().map(|(t, _)| *t).collect();
    let ys: Vec<f64> = positive.iter().map(|(_, f)| f.ln()).collect();
    let fit = stats::linear_fit(&xs, &ys);
    Ok(MixingFit {
        c: fit.intercept.exp(),
        rate: -fit.slope,
        rate_se: fit.slope_se,
        r_squared: fit.r_squared,
    })
}

/// Convenience wrapper fitting a [`CouplingRun`] in place.
pub fn fit_run(run: &mut CouplingRun) -> Result<MixingFit, CoreError> {
    let fit = fit_mixing_rate(&run.times, &run.uncoupled_fraction)?;
    run.fitted_rate = Some(fit.rate);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{CounterRng, StreamId};
    use crate::stats;

    fn gaussian_cloud(mean: f64, std: f64, m: usize, seed: u64) -> EmpiricalMeasure {
        let rng = CounterRng::new(seed, StreamId::Auxiliary(9));
        EmpiricalMeasure::uniform(
            (0..m)
                .map(|i| vec![mean + std * rng.normal(i as u64, 0)])
                .collect(),
        )
    }

    #[test]
    fn weights_must_normalize() {
        assert!(EmpiricalMeasure::new(vec![vec![0.0]], vec![0.5]).is_err());
        assert!(EmpiricalMeasure::new(vec![vec![0.0]], vec![1.0]).is_ok());
    }

    #[test]
    fn tv_identical_and_disjoint() {
        let p = gaussian_cloud(0.0, 1.0, 2000, 1);
        let binning = Binning::freedman_diaconis(&[&p, &p], DEFAULT_MAX_BINS);
        assert_eq!(tv_distance(&p, &p, &binning), 0.0);

        let q = gaussian_cloud(100.0, 1.0, 2000, 2);
        let b2 = Binning::freedman_diaconis(&[&p, &q], DEFAULT_MAX_BINS);
        assert!((tv_distance(&p, &q, &b2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tv_of_shifted_gaussians() {
        // closed form: 2 Phi(1/2) - 1 = 0.38292...
        let m = 100_000;
        let p = gaussian_cloud(0.0, 1.0, m, 3);
        let q = gaussian_cloud(1.0, 1.0, m, 4);
        let binning = Binning::freedman_diaconis(&[&p, &q], DEFAULT_MAX_BINS);
        let tv = tv_distance(&p, &q, &binning);
        assert!((tv - 0.3829).abs() < 0.02, "tv={tv}");
    }

    #[test]
    fn tv_symmetry_and_triangle_on_fixed_clouds() {
        let p = gaussian_cloud(0.0, 1.0, 3000, 5);
        let q = gaussian_cloud(0.7, 1.3, 3000, 6);
        let r = gaussian_cloud(-0.5, 0.8, 3000, 7);
        let b = Binning::freedman_diaconis(&[&p, &q, &r], DEFAULT_MAX_BINS);
        let pq = tv_distance(&p, &q, &b);
        let qp = tv_distance(&q, &p, &b);
        assert_eq!(pq, qp);
        let pr = tv_distance(&p, &r, &b);
        let rq = tv_distance(&r, &q, &b);
        assert!(pq <= pr + rq + 1e-12);
    }

    #[test]
    fn tv_warns_on_poor_coverage() {
        let p = gaussian_cloud(0.0, 1.0, 1000, 8);
        let q = gaussian_cloud(0.0, 1.0, 1000, 9);
        let b = Binning::explicit(vec![0], vec![-0.1], vec![0.1], vec![4]);
        let est = tv_distance_report(&p, &q, &b);
        assert!(!est.coverage_ok());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let rng = CounterRng::new(17, StreamId::Auxiliary(0));
        for case in 0..20u64 {
            let n = 2 + (case % 5) as usize;
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| rng.uniform(case * 100 + i as u64, j as u64)).collect())
                .collect();
            let (_, got) = min_cost_assignment(&cost);
            // brute force over permutations
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                if c < best {
                    best = c;
                }
            });
            assert!((got - best).abs() < 1e-12, "case {case}");
        }
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn wasserstein_zero_on_identical_clouds() {
        let p = gaussian_cloud(0.0, 1.0, 128, 10);
        let d = PseudoMetric::new(3);
        assert_eq!(wasserstein_pseudo(&p, &p, &d).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_two_point_masses() {
        // distance 1/(2n) is below the cap: cost = n * 1/(2n) = 1/2
        for n in [1u32, 4, 32] {
            let p = EmpiricalMeasure::uniform(vec![vec![0.0]]);
            let q = EmpiricalMeasure::uniform(vec![vec![1.0 / (2.0 * n as f64)]]);
            let w = wasserstein_pseudo(&p, &q, &PseudoMetric::new(n)).unwrap();
            assert!((w - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn wasserstein_saturates_to_tv_on_disjoint_clouds() {
        let p = gaussian_cloud(0.0, 0.1, 64, 11);
        let q = gaussian_cloud(10.0, 0.1, 64, 12);
        let w = wasserstein_pseudo(&p, &q, &PseudoMetric::new(1_000_000)).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn wasserstein_monotone_in_n_and_bounded_by_tv() {
        let p = gaussian_cloud(0.0, 1.0, 256, 13);
        let q = gaussian_cloud(0.8, 1.0, 256, 14);
        let mut last = 0.0;
        for n in [1u32, 2, 4, 8, 16, 64, 256] {
            let w = wasserstein_pseudo(&p, &q, &PseudoMetric::new(n)).unwrap();
            assert!(w + 1e-12 >= last, "monotone in n");
            last = w;
        }
        // the TV bound holds while 1/n stays above the cloud spacing ~1/M;
        // past that the independent-sample estimator saturates
        let tv = gaussian_tv_equal_cov(&[0.0], &[0.8], &[1.0]);
        let binning = Binning::freedman_diaconis(&[&p, &q], DEFAULT_MAX_BINS);
        let tv_hat = tv_distance(&p, &q, &binning);
        for n in [1u32, 2, 4, 8] {
            let w = wasserstein_pseudo(&p, &q, &PseudoMetric::new(n)).unwrap();
            assert!(w <= tv + 0.15, "n={n}: W_dn={w} vs TV={tv}");
            assert!(w <= tv_hat + 0.2, "n={n}: W_dn={w} vs estimated TV={tv_hat}");
        }
    }

    #[test]
    fn exact_route_rejects_unequal_sizes() {
        let p = gaussian_cloud(0.0, 1.0, 64, 15);
        let q = gaussian_cloud(0.0, 1.0, 65, 16);
        match wasserstein_pseudo(&p, &q, &PseudoMetric::new(2)) {
            Err(CoreError::SizeMismatch(64, 65)) => {}
            other => panic!("expected SizeMismatch, got {other:?}"),
        }
        // resampling fixes it
        let q2 = q.resample(64, 99);
        assert!(wasserstein_pseudo(&p, &q2, &PseudoMetric::new(2)).is_ok());
    }

    #[test]
    fn sinkhorn_agrees_with_exact_assignment() {
        let p = gaussian_cloud(0.0, 1.0, 96, 17);
        let q = gaussian_cloud(0.6, 1.0, 96, 18);
        let d = PseudoMetric::new(2);
        let exact = wasserstein_pseudo(&p, &q, &d).unwrap();
        let approx = sinkhorn_cost(&p, &q, &d, 0.01, 4000, 1e-9);
        assert!((exact - approx).abs() < 0.03, "exact={exact} sinkhorn={approx}");
    }

    #[test]
    fn coupling_identical_distributions_always_couples() {
        let p = GaussianDiag {
            mean: vec![0.3, -1.0],
            std: vec![1.0, 0.5],
        };
        for seed in 0..200 {
            let (x, y, coupled) = maximal_coupling_gaussian(&p, &p, seed);
            assert!(coupled);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn coupling_uncoupled_fraction_equals_tv() {
        let p = GaussianDiag {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let q = GaussianDiag {
            mean: vec![1.0],
            std: vec![1.0],
        };
        let n = 100_000;
        let frac = uncoupled_fraction_gaussian(&p, &q, n, 2718);
        assert!((frac - 0.3829).abs() < 0.005, "frac={frac}");
    }

    #[test]
    fn coupling_marginals_pass_ks() {
        let p = GaussianDiag {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let q = GaussianDiag {
            mean: vec![1.0],
            std: vec![1.0],
        };
        let base = CounterRng::new(3141, StreamId::Auxiliary(5));
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y, _) = maximal_coupling_gaussian(&p, &q, base.derive_seed(i as u64, 0));
            xs.push(x[0]);
            ys.push(y[0]);
        }
        assert!(stats::ks_test_normal(&xs, 0.0, 1.0) > 0.01);
        assert!(stats::ks_test_normal(&ys, 1.0, 1.0) > 0.01);
    }

    #[test]
    fn discrete_coupling_disjoint_supports_never_couple() {
        let wp = [0.5, 0.5, 0.0, 0.0];
        let wq = [0.0, 0.0, 0.25, 0.75];
        for seed in 0..100 {
            let (i, j, coupled) = maximal_coupling_discrete(&wp, &wq, seed);
            assert!(!coupled);
            assert!(i < 2 && j >= 2);
        }
    }

    #[test]
    fn mixing_fit_exact_geometric() {
        let fit = fit_mixing_rate(&[0.0, 1.0, 2.0, 3.0], &[1.0, 0.5, 0.25, 0.125]).unwrap();
        assert!((fit.rate - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((fit.c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_fit_instant_coupling_is_marked_infinite() {
        let fit = fit_mixing_rate(&[0.0, 1.0, 2.0, 3.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(fit.rate.is_infinite());
    }

    #[test]
    fn mixing_fit_needs_four_points() {
        let err = fit_mixing_rate(&[0.0, 1.0, 2.0, 3.0], &[1.0, 0.5, 0.0, 0.1]);
        // three nonzero checkpoints and not all-zero-after-first
        assert!(matches!(err, Err(CoreError::InsufficientData { .. })));
    }

    #[test]
    fn mixing_fit_recovers_synthetic_rate() {
        let rng = CounterRng::new(55, StreamId::Auxiliary(6));
        let times: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let fracs: Vec<f64> = times
            .iter()
            .enumerate()
            .map(|(i, t)| (-0.7 * t).exp() * (1.0 + 0.01 * rng.normal(i as u64, 0)))
            .collect();
        let fit = fit_mixing_rate(&times, &fracs).unwrap();
        assert!((fit.rate - 0.7).abs() < 0.05, "rate={}", fit.rate);
    }

    #[test]
    fn coupling_run_fractions_are_nonincreasing() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let cts = vec![Some(0.5), Some(1.5), None, Some(2.5)];
        let run = CouplingRun::from_coupling_times(&times, cts);
        for w in run.uncoupled_fraction.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(run.uncoupled_fraction[0], 1.0);
        assert_eq!(run.uncoupled_fraction[3], 0.25);
        let csv = run.to_csv();
        assert!(csv.starts_with("time,uncoupled_fraction\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
