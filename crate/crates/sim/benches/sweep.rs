use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pixseq_sim::{sweep, PipelineSpec};

fn bench_sweep(c: &mut Criterion) {
    let specs: Vec<PipelineSpec> = (1..=8)
        .flat_map(|s| [4, 8, 16].into_iter().flat_map(move |m| [1, 2, 4].into_iter().map(move |r| PipelineSpec::uniform(s, m, r))))
        .collect();
    let mut group = c.benchmark_group("pipeline_sweep");
    for (name, parallel) in [("sequential", false), ("parallel", true)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &parallel, |b, &p| b.iter(|| sweep(&specs, p).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
