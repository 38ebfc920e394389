use chordal_verify::admm::step;
use chordal_verify::{AdmmOptions, Mode};
use chordal_verify_bench::iteration_setup;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn per_iteration(c: &mut Criterion) {
    let opts = AdmmOptions::default();
    let mut group = c.benchmark_group("admm_iteration");
    group.sample_size(20);
    for mode in [Mode::Chordal2, Mode::Chordal, Mode::Dense] {
        for depth in [5, 10, 20, 40] {
            if mode == Mode::Dense && depth > 20 {
                continue;
            }
            let (problem, cache, mut state) = iteration_setup(10, depth, 2, mode);
            group.bench_with_input(BenchmarkId::new(mode.to_string(), depth), &depth, |b, _| {
                b.iter(|| step(&mut state, &cache, &problem, &opts, opts.rho).expect("step runs"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, per_iteration);
criterion_main!(benches);
