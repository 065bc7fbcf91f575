use compvid::config::ModelConfig;
use compvid::datagen::generate_sequence;
use compvid::frontend::Adjacency;
use compvid::latent::{ChaChaNoise, NoiseSource};
use compvid::model::{build_model, LatentMode, Outputs};
use compvid::nn::ParamStore;
use compvid::predictor::{message_pass_block, InteractionBlock};
use compvid::training::Trainer;
use compvid_bench::{energy, rng, uniform, Graph};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut r = rng(1);
    let x = uniform(&mut r, &[2, 19, 64, 64], -1.0, 1.0);
    let w = uniform(&mut r, &[8, 19, 3, 3], -0.2, 0.2);
    let b = uniform(&mut r, &[8], -0.1, 0.1);
    c.bench_function("conv3x3_64px_forward", |bench| {
        bench.iter(|| compvid::autograd::conv2d_forward(black_box(&x), &w, Some(&b), 1, 1))
    });
    c.bench_function("conv3x3_64px_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 1, 1);
            let e = energy(&mut g, y);
            g.backward(e)
        })
    });
}

fn warp_compose(c: &mut Criterion) {
    let mut r = rng(2);
    let (f, n, ch, p, size) = (16, 3, 16, 16, 64);
    let patches = uniform(&mut r, &[f * n, ch, p, p], 0.0, 1.0);
    let masks = uniform(&mut r, &[f * n, 1, p, p], 0.0, 1.0);
    let centers = uniform(&mut r, &[f * n, 2], 0.2, 0.8);
    let bg = uniform(&mut r, &[f, ch, size, size], 0.0, 1.0);
    c.bench_function("warp_compose_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let pv = g.leaf(patches.clone());
            let mv = g.leaf(masks.clone());
            let cv = g.leaf(centers.clone());
            let bv = g.leaf(bg.clone());
            let wf = g.warp(pv, cv, 20.0, size, size, n);
            let wm = g.warp(mv, cv, 20.0, size, size, n);
            let out = g.compose(bv, wf, wm);
            let e = energy(&mut g, out);
            g.backward(e)
        })
    });
}

fn message_passing(c: &mut Criterion) {
    let mut r = rng(3);
    let mut store = ParamStore::<f32>::new();
    let block = InteractionBlock::new(&mut store, &mut r, "block", 64, 64);
    let nodes = uniform(&mut r, &[4, 6, 64], -1.0, 1.0);
    let adj = Adjacency::full(6);
    c.bench_function("message_pass_block_b4_n6_d64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let v = g.leaf(nodes.clone());
            let out = message_pass_block(&mut g, &p, &block, v, &adj, 0.2).unwrap();
            let e = energy(&mut g, out);
            g.backward(e)
        })
    });
}

fn rollout(c: &mut Criterion) {
    let cfg = ModelConfig {
        feature_channels: 16,
        refine_width: 8,
        decoder_width: 8,
        batch_size: 1,
        ..ModelConfig::default()
    };
    let model = build_model(&cfg).unwrap();
    let seq = generate_sequence(5, 3, cfg.horizon, cfg.canvas).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("rollout_k10_locations", |bench| {
        bench.iter(|| {
            let mut noises: Vec<ChaChaNoise> = (0..10).map(|k| ChaChaNoise::new(0, k)).collect();
            let refs: Vec<&mut dyn NoiseSource> = noises.iter_mut().map(|n| n as &mut dyn NoiseSource).collect();
            model
                .rollout(&seq, 0, cfg.horizon, LatentMode::Prior(refs), Outputs::LOCATIONS)
                .unwrap()
        })
    });
    group.bench_function("rollout_k1_frames", |bench| {
        bench.iter(|| {
            let mut noise = ChaChaNoise::new(0, 0);
            model
                .rollout(&seq, 0, cfg.horizon, LatentMode::Prior(vec![&mut noise]), Outputs::FRAMES)
                .unwrap()
        })
    });
    let data: Vec<_> = (0..2).map(|i| generate_sequence(i, 3, cfg.horizon, cfg.canvas).unwrap()).collect();
    let mut trainer = Trainer::new(model.clone(), data).unwrap();
    group.bench_function("train_step_batch1", |bench| bench.iter(|| trainer.train_step().unwrap()));
    group.finish();
}

criterion_group!(benches, conv, warp_compose, message_passing, rollout);
criterion_main!(benches);
