//! Sequential recurrence against the associative-scan formulation.
//!
//! Run with `--no-default-features` to time both without rayon.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use quadscan::harness::bench::scan_inputs;
use quadscan::ssm::parallel_scan_inputs;

fn scans(c: &mut Criterion) {
    let mut g = c.benchmark_group("selective_scan");
    for len in [256usize, 1024, 4096, 16384] {
        let inp = scan_inputs(len, 16, 16, 1);
        g.throughput(Throughput::Elements(len as u64));
        g.bench_with_input(BenchmarkId::new("sequential", len), &inp, |b, inp| b.iter(|| inp.run(false).0));
        g.bench_with_input(BenchmarkId::new("associative", len), &inp, |b, inp| {
            b.iter(|| parallel_scan_inputs(inp))
        });
    }
    g.finish();
}

criterion_group!(benches, scans);
criterion_main!(benches);
