//! Batch evaluation of the micro model, one image per task against a plain loop.

use criterion::{criterion_group, criterion_main, Criterion};
use quadscan::backbone::{build_variant, VariantConfig};
use quadscan::block::RunCtx;
use quadscan::harness::data::gen_synthetic;

fn batch(c: &mut Criterion) {
    let model = build_variant::<f32>(&VariantConfig::micro(), 0).unwrap();
    let images: Vec<_> = gen_synthetic(16, 0).unwrap().into_iter().map(|s| s.image).collect();
    let mut g = c.benchmark_group("micro_eval_16");
    g.sample_size(20);
    g.bench_function("classify_batch", |b| b.iter(|| model.classify_batch(&images).unwrap()));
    g.bench_function("loop", |b| {
        b.iter(|| {
            images
                .iter()
                .map(|img| model.classify(img, &mut RunCtx::eval()).unwrap())
                .collect::<Vec<_>>()
        })
    });
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
