use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dabs_bench::{model, sentence};

fn reuse_vs_per_aspect(c: &mut Criterion) {
    let m = model(32, 6, 6);
    let mut group = c.benchmark_group("serve");
    for aspects in [1usize, 2, 4, 8] {
        let (tokens, spans) = sentence(24, aspects);
        group.bench_with_input(BenchmarkId::new("reuse", aspects), &aspects, |b, _| {
            b.iter(|| black_box(m.predict_shared(&tokens, &spans, None).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("per_aspect", aspects), &aspects, |b, _| {
            b.iter(|| {
                for &s in &spans {
                    black_box(m.predict_isolated(&tokens, s, None).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn stages(c: &mut Criterion) {
    let m = model(32, 6, 6);
    let (tokens, spans) = sentence(24, 1);
    let stack = m.encode(&tokens).unwrap();
    let state = m.prepare(&tokens).unwrap();
    let mut group = c.benchmark_group("stage");
    group.bench_function("encoder", |b| b.iter(|| black_box(m.encode(&tokens).unwrap())));
    group.bench_function("substrate", |b| b.iter(|| black_box(m.dora.build_substrate(&m.store, &stack).unwrap())));
    group.bench_function("read", |b| b.iter(|| black_box(m.read(&state, spans[0], None).unwrap())));
    group.finish();
}

criterion_group!(benches, reuse_vs_per_aspect, stages);
criterion_main!(benches);
