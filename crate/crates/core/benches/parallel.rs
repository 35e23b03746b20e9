use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nebcast::experiments::runner::{cells, run_instance};
use nebcast::experiments::{Scenario, ScenarioConfig};
use nebcast::par;

fn batch_config(n_nodes: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::desk(Scenario::CoverageOffline);
    c.network.n_nodes = n_nodes;
    c.schedule.rounds_per_node = 2;
    c.repeats = 2;
    c.protocol.betas = vec![1, 2];
    c
}

fn run_batch(c: &ScenarioConfig, parallel: bool) -> u64 {
    let cells = cells(c);
    let jobs = cells.len() * c.repeats;
    let job = |i: usize| run_instance(c, cells[i / c.repeats], i % c.repeats).unwrap().received();
    let received =
        if parallel { par::map_indexed(jobs, job) } else { par::map_indexed_sequential(jobs, job) };
    received.into_iter().sum()
}

fn instances(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulation_batch");
    group.sample_size(10);
    for n in [50, 100] {
        let config = batch_config(n);
        // 2 modes x 2 betas x 2 variants x 2 repeats = 16 independent runs
        assert_eq!(run_batch(&config, true), run_batch(&config, false));
        group.bench_with_input(BenchmarkId::new("parallel", n), &config, |b, cfg| {
            b.iter(|| run_batch(cfg, true))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &config, |b, cfg| {
            b.iter(|| run_batch(cfg, false))
        });
    }
    group.finish();
    println!("rayon enabled: {}", par::is_parallel());
}

criterion_group!(benches, instances);
criterion_main!(benches);
