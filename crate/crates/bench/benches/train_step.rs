use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use psgan_core::data::sample_patch_batch;
use psgan_core::trainer::{step_rng, train_step, StepStream};

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (minibatch, base) in [(8, 8), (8, 16)] {
        let (state, source) = psgan_bench::training(minibatch, base);
        let real = sample_patch_batch(&source, 64, minibatch, &mut step_rng(0, 0, StepStream::RealPatches));
        group.bench_function(format!("b{minibatch}_c{base}"), |b| {
            b.iter_batched(
                || state.clone(),
                |mut s| train_step(&mut s, &real).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
