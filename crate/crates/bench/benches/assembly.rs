use chordal_verify::admm::KktCache;
use chordal_verify::verify::build_request_problem;
use chordal_verify::{AdmmOptions, Mode};
use chordal_verify_bench::{bench_network, bench_request};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("assemble");
    group.sample_size(10);
    for depth in [10, 20, 40] {
        let net = bench_network(10, depth, 0);
        let req = bench_request(&net, 2, Mode::Chordal2);
        group.bench_with_input(BenchmarkId::new("problem", depth), &depth, |b, _| {
            b.iter(|| build_request_problem(&req).expect("problem builds"))
        });
        let problem = build_request_problem(&req).expect("problem builds");
        let opts = AdmmOptions::default();
        group.bench_with_input(BenchmarkId::new("kkt_factor", depth), &depth, |b, _| {
            b.iter(|| {
                KktCache::new(&problem, opts.rho, opts.gamma_update, opts.reg)
                    .expect("system factors")
            })
        });
    }
    group.finish();
}

criterion_group!(benches, assembly);
criterion_main!(benches);
