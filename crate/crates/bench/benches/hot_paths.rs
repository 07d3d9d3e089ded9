use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use twonoise_core::driving::{DrivingPath, OuSpec};
use twonoise_core::integrator::{integrate, StepScheme, WienerStream};
use twonoise_core::measures::{
    maximal_coupling_gaussian, wasserstein_pseudo, EmpiricalMeasure, GaussianDiag, PseudoMetric,
};
use twonoise_core::navier_stokes::{as_semilinear, nonlinear_term, NsModelSpec, SpectralGrid};
use twonoise_core::oracle;
use twonoise_core::rng::{CounterRng, StreamId};

fn bench_driving(c: &mut Criterion) {
    let spec = OuSpec::unit();
    c.bench_function("driving/stationary_window_1k_steps", |b| {
        b.iter(|| DrivingPath::stationary(spec.clone(), 10.0, 0.01, 7).unwrap())
    });
    let path = DrivingPath::stationary(spec, 10.0, 0.01, 7).unwrap();
    c.bench_function("driving/advance_100_steps", |b| {
        b.iter(|| path.advance(1.0).unwrap())
    });
}

fn bench_integrator(c: &mut Criterion) {
    let model = oracle::example1d_model();
    let scheme = StepScheme::exponential_euler(0.01);
    let path = DrivingPath::stationary(OuSpec::unit(), 10.0, 0.01, 7).unwrap();
    c.bench_function("integrate/example1d_1k_steps", |b| {
        b.iter(|| integrate(&model, &scheme, &[0.5], -10.0, 0.0, &path, &WienerStream::new(3)))
    });
}

fn bench_navier_stokes(c: &mut Criterion) {
    for n in [16usize, 32] {
        let grid = SpectralGrid::new(n).unwrap();
        let rng = CounterRng::new(1, StreamId::Auxiliary(0));
        let packed: Vec<f64> = (0..grid.dim()).map(|i| 0.3 * rng.normal(i as u64, 0)).collect();
        c.bench_function(&format!("ns/nonlinear_term_n{n}"), |b| {
            b.iter(|| nonlinear_term(&grid, &packed))
        });
    }
    let grid = SpectralGrid::new(16).unwrap();
    let spec = NsModelSpec {
        viscosity: 0.5,
        alpha: 3.0,
        trace_c: 1.0,
        coupling_gain: 0.25,
        driving_modes: 10,
    };
    let model = as_semilinear(&spec, &grid).unwrap();
    let scheme = StepScheme::exponential_euler(0.01);
    let path = DrivingPath::stationary(spec.ou_driver(), 2.0, 0.01, 9)
        .unwrap()
        .shift_time(2.0);
    let x0 = vec![0.0; grid.dim()];
    c.bench_function("integrate/ns2d_n16_100_steps", |b| {
        b.iter(|| integrate(&model, &scheme, &x0, 0.0, 1.0, &path, &WienerStream::new(5)))
    });
}

fn bench_measures(c: &mut Criterion) {
    let rng = CounterRng::new(11, StreamId::Auxiliary(1));
    let cloud = |seed: u64, m: usize, shift: f64| {
        EmpiricalMeasure::uniform(
            (0..m)
                .map(|i| vec![shift + rng.normal(seed * 10_000 + i as u64, 0)])
                .collect(),
        )
    };
    for m in [128usize, 256] {
        let p = cloud(1, m, 0.0);
        let q = cloud(2, m, 0.7);
        let d = PseudoMetric::new(4);
        c.bench_function(&format!("measures/wasserstein_exact_m{m}"), |b| {
            b.iter(|| wasserstein_pseudo(&p, &q, &d).unwrap())
        });
    }
    let g1 = GaussianDiag {
        mean: vec![0.0],
        std: vec![1.0],
    };
    let g2 = GaussianDiag {
        mean: vec![1.0],
        std: vec![1.0],
    };
    c.bench_function("measures/maximal_coupling_draw", |b| {
        let mut seed = 0u64;
        b.iter_batched(
            || {
                seed += 1;
                seed
            },
            |s| maximal_coupling_gaussian(&g1, &g2, s),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_driving,
    bench_integrator,
    bench_navier_stokes,
    bench_measures
);
criterion_main!(benches);
