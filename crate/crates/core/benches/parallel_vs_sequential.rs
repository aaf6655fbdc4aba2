use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use crimesim_core::decision::EngineConfig;
use crimesim_core::env::CityEnvironment;
use crimesim_core::exec::ExecMode;
use crimesim_core::population::AgentCounts;
use crimesim_core::simulation::{run_in, RunConfig};
use crimesim_core::synthetic::SyntheticCity;

fn config(mode: ExecMode, steps: u32) -> RunConfig {
    let mut cfg = RunConfig::new(EngineConfig::Hotspot { p_base: 0.05, deterrence: 0.5 });
    cfg.seed = 1;
    cfg.steps = steps;
    cfg.exec_mode = mode;
    cfg
}

fn bench_runs(c: &mut Criterion) {
    let env: CityEnvironment = SyntheticCity::grid(25, 40, 7).build();
    let mut group = c.benchmark_group("simulation_run");
    group.sample_size(10);
    for (label, mode) in [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)] {
        group.bench_with_input(BenchmarkId::new(label, "1000 cells x 10 steps"), &mode, |b, &mode| {
            let cfg = config(mode, 10);
            b.iter(|| black_box(run_in(&env, &cfg).unwrap().total()));
        });
    }
    group.finish();
}

fn bench_population_scale(c: &mut Criterion) {
    let env = SyntheticCity::grid(25, 40, 7).build();
    let mut group = c.benchmark_group("agents_scaling");
    group.sample_size(10);
    for factor in [1usize, 4] {
        let counts = AgentCounts { citizens: 4000 * factor, criminals: 1000 * factor, police: 500 * factor };
        for (label, mode) in [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)] {
            group.bench_with_input(BenchmarkId::new(label, factor), &counts, |b, &counts| {
                let mut cfg = config(mode, 5);
                cfg.counts = counts;
                b.iter(|| black_box(run_in(&env, &cfg).unwrap().total()));
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_runs, bench_population_scale);
criterion_main!(benches);
