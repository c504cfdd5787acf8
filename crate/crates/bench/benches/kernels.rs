use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use scp_bench::{batch, clip, frame, model};
use scp_core::model::PromptMode;
use scp_core::visual::{estimate_flow, flow_prompt_video, ClipPartition};
use scp_core::{Graph, RngStream, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let a = Tensor::randn(&[16, 128, 16], 1.0, &mut rng);
    let b = Tensor::randn(&[16, 32], 1.0, &mut rng);
    c.bench_function("matmul 16x128x16 * 16x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.input(a.clone());
            let w = g.input(b.clone());
            let y = g.matmul(x, w).unwrap();
            g.forward().unwrap();
            g.value(y).unwrap().len()
        })
    });
}

fn flow(c: &mut Criterion) {
    let (a, b) = (frame(32, 1), frame(32, 2));
    c.bench_function("estimate_flow 32x32 block 4 radius 4", |bench| {
        bench.iter(|| estimate_flow(&a, &b, 4, 4).unwrap())
    });
    let clip = clip();
    let partition = ClipPartition::new(8, 4).unwrap();
    c.bench_function("flow_prompt_video 8 frames", |bench| {
        bench.iter(|| flow_prompt_video(&clip.frames, partition, 4, 4).unwrap())
    });
}

fn synthesize(c: &mut Criterion) {
    let m = model(PromptMode::ScpConcat, 4);
    let pool = m.prompt_pool().unwrap();
    let features = Tensor::randn(&[16, 64, 16], 1.0, &mut RngStream::new(3));
    c.bench_function("gate + synthesize, 8 experts", |bench| {
        bench.iter(|| {
            let w = pool.gate(&features).unwrap();
            pool.synthesize(&w).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward+backward, 4 videos");
    group.sample_size(10);
    for (name, mode) in [("none", PromptMode::None), ("scp-concat", PromptMode::ScpConcat)] {
        let m = model(mode, 8);
        let b = batch(&m, 4);
        group.bench_function(name, |bench| {
            bench.iter_batched(
                Graph::new,
                |mut g| {
                    let built = m.build(&mut g, &b).unwrap();
                    let loss = g.cross_entropy(built.logits, &[0, 1, 2, 3]).unwrap();
                    g.forward().unwrap();
                    g.backward(loss).unwrap().len()
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, flow, synthesize, train_step);
criterion_main!(benches);
