use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use diablo_bench::ParityFixture;
use diablo_core::quant::{dequant_matmul, quantize};

fn adapters_at_parity(c: &mut Criterion) {
    let mut group = c.benchmark_group("adapter_step");
    for &(m, n) in &[(256usize, 16usize), (1024, 32)] {
        let f = ParityFixture::new(m, 32, n, 7);
        let w_out = f.x.matmul(&f.w).unwrap();
        let label = format!("m{m}_N{n}_r{}", f.rank());
        group.bench_with_input(BenchmarkId::new("diablo_forward", &label), &f, |b, f| {
            b.iter(|| f.diablo.forward(black_box(&f.x), &w_out).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("lora_forward", &label), &f, |b, f| {
            b.iter(|| f.lora.forward(black_box(&f.x), &w_out).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("diablo_backward", &label), &f, |b, f| {
            b.iter(|| f.diablo.param_grads(black_box(&f.x), &f.g_y).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("lora_backward", &label), &f, |b, f| {
            b.iter(|| f.lora.param_grads(black_box(&f.x), &f.g_y).unwrap())
        });
    }
    group.finish();
}

fn quantized_base(c: &mut Criterion) {
    let f = ParityFixture::new(1024, 32, 32, 9);
    let mut group = c.benchmark_group("base_matmul");
    group.bench_function("dense_f32", |b| {
        b.iter(|| black_box(&f.x).matmul(&f.w).unwrap())
    });
    for bits in [4u8, 2] {
        let q = quantize(&f.w, bits, 64).unwrap();
        group.bench_function(format!("dequant_{bits}bit"), |b| {
            b.iter(|| dequant_matmul(black_box(&f.x), &q).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, adapters_at_parity, quantized_base);
criterion_main!(benches);
