use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use have_core::{decode_step, read_trace, write_trace, ModelDims, Policy, ToyConfig, ToyModel};
use std::hint::black_box;

fn decode(c: &mut Criterion) {
    let cfg = have_bench::have_config();
    let mut group = c.benchmark_group("decode_step");
    for (layers, heads, ctx) in [(2, 4, 32), (8, 8, 256), (16, 16, 1024)] {
        let s = have_bench::snapshot(ModelDims::new(512, layers, heads, heads / 2), ctx, 1);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("L{layers}H{heads}C{ctx}")),
            &s,
            |b, s| b.iter(|| decode_step(black_box(s), &cfg).unwrap()),
        );
    }
    group.finish();
}

fn trace_io(c: &mut Criterion) {
    let t = have_bench::trace(ModelDims::new(512, 4, 8, 4), 128, 16);
    let mut bytes = Vec::new();
    write_trace(&t, &mut bytes).unwrap();
    c.bench_function("trace_write", |b| {
        b.iter(|| {
            let mut out = Vec::with_capacity(bytes.len());
            write_trace(black_box(&t), &mut out).unwrap();
            out
        })
    });
    c.bench_function("trace_read", |b| {
        b.iter(|| read_trace(black_box(bytes.as_slice())).unwrap())
    });
}

fn toy_forward(c: &mut Criterion) {
    let model = ToyModel::new(ToyConfig::default()).unwrap();
    let prompt: Vec<u32> = (0..32).map(|i| 3 + i % 200).collect();
    c.bench_function("toy_live_decode_16", |b| {
        b.iter(|| {
            have_core::toy::live_decode(&model, black_box(&prompt), &Policy::Greedy, 16, None)
                .unwrap()
        })
    });
}

criterion_group!(benches, decode, trace_io, toy_forward);
criterion_main!(benches);
