use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use walkhammer::config::desk;
use walkhammer::harness::{run_experiment, Executor, ExperimentId, ExperimentSpec, Sweep};

fn seeds(c: &mut Criterion) {
    let base = desk();
    let mut g = c.benchmark_group("seed_fanout");
    g.sample_size(10);
    for (id, reps) in [(ExperimentId::E1, 8), (ExperimentId::E3, 4)] {
        let mut spec = ExperimentSpec::new(id, "desk");
        spec.reps = reps;
        spec.sweep = Sweep { targets: Some(16), trials: Some(50), ..Sweep::default() };
        for (label, exec) in [("parallel", Executor::Parallel), ("sequential", Executor::Sequential)] {
            g.bench_with_input(BenchmarkId::new(label, id.name()), &spec, |b, s| {
                b.iter(|| run_experiment(s, &base, exec).expect("experiment runs"))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, seeds);
criterion_main!(benches);
