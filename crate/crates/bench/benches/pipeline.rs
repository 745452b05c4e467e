use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsl_core::analytics::{hungarian, wasserstein2, PointCloud};
use vsl_core::guards::{pipeline_step, GuardConfig, PipelineState};
use vsl_core::marl::train::initial_params;
use vsl_core::marl::Hyperparams;
use vsl_core::sim::{testing_scenario, Simulator};
use vsl_core::Measurement;

fn guards(c: &mut Criterion) {
    let scenario = testing_scenario(0);
    let corridor = scenario.corridor.build().unwrap();
    let policy = initial_params(&scenario, &Hyperparams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let snapshot: Vec<Measurement> = corridor
        .sensors()
        .iter()
        .map(|s| Measurement::new(s.id.clone(), 0, rng.random_range(5.0..75.0), rng.random_range(0.0..0.6)))
        .collect();
    let state = PipelineState::new(corridor.len());
    let cfg = GuardConfig::default();
    c.bench_function("pipeline_step/34_gantries", |b| {
        b.iter(|| pipeline_step(&corridor, black_box(&snapshot), &policy, &cfg, &state).unwrap())
    });
}

fn transport(c: &mut Criterion) {
    let mut group = c.benchmark_group("wasserstein2");
    group.sample_size(10);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [100usize, 300, 1000] {
        let mut cloud =
            || PointCloud::new((0..n).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect()).unwrap();
        let (a, b) = (cloud(), cloud());
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| wasserstein2(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
    let cost: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..200).map(|_| rng.random::<f64>()).collect())
        .collect();
    c.bench_function("hungarian/200", |b| b.iter(|| hungarian(black_box(&cost))));
}

fn simulator(c: &mut Criterion) {
    let scenario = testing_scenario(0);
    let mut sim = Simulator::new(&scenario).unwrap();
    sim.run_for(600.0);
    c.bench_function("ctm_step/17mi", |b| {
        b.iter(|| {
            sim.step();
            black_box(sim.total_vehicles())
        })
    });
}

criterion_group!(benches, guards, transport, simulator);
criterion_main!(benches);
