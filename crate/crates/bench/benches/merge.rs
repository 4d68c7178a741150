use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use surgeon_bench::matrix_store;
use surgeon_core::merge::{lerp, slerp, soup};
use surgeon_core::tensorstore::Dtype;

fn merges(c: &mut Criterion) {
    let (rows, cols) = (1024, 896);
    let a = matrix_store(rows, cols, Dtype::BF16, 0.0);
    let b = matrix_store(rows, cols, Dtype::BF16, 1.0);
    let d = matrix_store(rows, cols, Dtype::BF16, 2.0);
    let mut group = c.benchmark_group("merge_bf16");
    group.throughput(Throughput::Elements((rows * cols) as u64));
    group.bench_function("lerp", |bench| bench.iter(|| lerp(&a, &b, 0.3).unwrap()));
    group.bench_function("slerp", |bench| bench.iter(|| slerp(&a, &b, 0.3).unwrap()));
    group.bench_function("soup3", |bench| {
        bench.iter(|| soup(&[&a, &b, &d], &[0.5, 0.25, 0.25]).unwrap())
    });
    group.finish();
}

criterion_group!(benches, merges);
criterion_main!(benches);
