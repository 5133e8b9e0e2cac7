use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use songdemand_core::bayes::{
    fit_null_model, sample_prior, simulate_null_data, McmcConfig, NullLayout, NullModelSpec,
};
use songdemand_core::clustering::{dtw_distance, kmeans_curves, KMeansConfig};
use songdemand_core::envelope::{fit_changepoints, ChangePoints, ChangepointConfig, EnvelopeFit, NodeValues};
use songdemand_core::optimizer::lp_null_max;
use songdemand_core::{CovariatePath, DemandCurve, DemandRng, Stratum};

fn envelope_curve(horizon: usize, rng: &mut DemandRng) -> DemandCurve {
    let cp = ChangePoints::new(horizon / 8, horizon * 3 / 8, horizon * 5 / 8, horizon - 2).unwrap();
    let fit = EnvelopeFit::new(cp, NodeValues { attack: 1000.0, sustain: 800.0, decay: 200.0 });
    let y = (0..horizon).map(|t| (fit.level(t as f64) * (1.0 + 0.02 * rng.standard_normal())).max(0.0).round() as u64);
    DemandCurve::new("bench", Stratum::Aggregate, y.collect())
}

fn changepoints(c: &mut Criterion) {
    let mut rng = DemandRng::seed_from(1);
    let mut group = c.benchmark_group("changepoint_search");
    for horizon in [40, 80, 120] {
        let curve = envelope_curve(horizon, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(horizon), &curve, |b, curve| {
            b.iter(|| fit_changepoints(black_box(curve), &ChangepointConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let mut rng = DemandRng::seed_from(2);
    let a: Vec<f64> = (0..52).map(|_| rng.uniform()).collect();
    let b: Vec<f64> = (0..52).map(|_| rng.uniform()).collect();
    c.bench_function("dtw_52x52", |bench| bench.iter(|| dtw_distance(black_box(&a), black_box(&b)).unwrap()));

    let curves: Vec<(String, Vec<f64>)> = (0..30)
        .map(|i| {
            let scale = [1.0, 3.0, 9.0][i % 3];
            let y = envelope_curve(40, &mut rng).as_f64().into_iter().map(|v| v * scale).collect();
            (format!("c{i}"), y)
        })
        .collect();
    c.bench_function("kmeans_30_curves_k3", |bench| {
        bench.iter(|| kmeans_curves(black_box(&curves), 3, 0, &KMeansConfig::default()).unwrap())
    });
}

fn lp(c: &mut Criterion) {
    let theta = [0.3, 0.7, 0.15, 0.5, 0.9];
    c.bench_function("lp_null_5_channels", |b| {
        b.iter(|| lp_null_max(black_box(&theta), &[1.0], &[0.2], black_box(1.3)).unwrap())
    });
}

fn null_mcmc(c: &mut Criterion) {
    let layout = NullLayout { segments: vec![2], channels: 1, ambient: 1, intercept: false };
    let spec = NullModelSpec::weakly_informative(1, 1, 1);
    let mut rng = DemandRng::seed_from(3);
    let truth = sample_prior(&spec, &layout, &mut rng).unwrap();
    let paths = vec![(0..2)
        .map(|_| {
            let x = (0..40).map(|_| vec![rng.uniform()]).collect();
            let z = (0..40).map(|_| vec![rng.uniform()]).collect();
            CovariatePath::new(x, z).unwrap()
        })
        .collect::<Vec<_>>()];
    let data = simulate_null_data(&truth, &paths, &mut rng).unwrap();
    let config = McmcConfig { chains: 2, warmup: 200, samples: 200, ..Default::default() };
    let mut group = c.benchmark_group("null_mcmc");
    group.sample_size(10);
    group.bench_function("2x400_two_segments", |b| b.iter(|| fit_null_model(black_box(&data), &spec, &config).unwrap()));
    group.finish();
}

criterion_group!(benches, changepoints, clustering, lp, null_mcmc);
criterion_main!(benches);
