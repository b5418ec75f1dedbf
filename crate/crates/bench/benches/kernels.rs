use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lungseg_core::metrics::seg_confusion;
use lungseg_core::model::{build_unet, seg_forward, UNetConfig};
use lungseg_core::phantom::{gen_phantom, PhantomParams};
use lungseg_core::train::{adam_step, AdamState};
use lungseg_core::{Graph, LabelMap, LabelSchema, SplitMix64, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32)
}

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (cin, cout, hw) in [(1, 8, 64), (8, 8, 64), (16, 32, 32)] {
        let x = random(&[4, cin, hw, hw], 1);
        let k = random(&[cout, cin, 3, 3], 2);
        let b = random(&[cout], 3);
        let id = format!("{cin}to{cout}_{hw}px");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, kv, bv) = (g.input(x.clone()), g.param("k", k.clone()), g.param("b", b.clone()));
                black_box(g.conv2d(xv, kv, Some(bv), 1).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, kv, bv) = (g.input(x.clone()), g.param("k", k.clone()), g.param("b", b.clone()));
                let y = g.conv2d(xv, kv, Some(bv), 1).unwrap();
                let loss = g.sum(y).unwrap();
                g.backward(loss).unwrap();
                black_box(g.grad(kv));
            })
        });
    }
    group.finish();
}

fn unet_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("unet_train_step");
    group.sample_size(20);
    for (h, w) in [(32, 32), (48, 64), (96, 128)] {
        let cfg = UNetConfig { in_channels: 1, depth: 3, base_channels: 8, n_seg_classes: 7 };
        let mut rng = SplitMix64::new(5);
        let batch = Tensor::from_fn(&[4, 1, h, w], |_| rng.next_f64() as f32);
        let targets: Vec<usize> = (0..4 * h * w).map(|i| i % 7).collect();
        group.bench_function(format!("{h}x{w}_batch4"), |bench| {
            let mut weights = build_unet(&cfg, 0).unwrap();
            let mut state = AdamState::default();
            bench.iter(|| {
                let mut g = Graph::new();
                let logits = seg_forward(&mut g, &weights, &batch).unwrap();
                let probs = g.softmax_channels(logits).unwrap();
                let loss = g.cross_entropy(probs, &targets).unwrap();
                g.backward(loss).unwrap();
                adam_step(&mut weights, &g.param_grads(), &mut state, 1e-3).unwrap();
            })
        });
    }
    group.finish();
}

fn confusion(c: &mut Criterion) {
    let params = PhantomParams { height: 464, width: 624, ..Default::default() };
    let (_, gt) = gen_phantom(&params, 1).unwrap();
    let (_, pred) = gen_phantom(&params, 2).unwrap();
    let pred = LabelMap::new(LabelSchema::Dense, 464, 624, pred.pixels().to_vec()).unwrap();
    c.bench_function("seg_confusion_464x624", |bench| bench.iter(|| black_box(seg_confusion(&pred, &gt).unwrap())));
}

fn phantom(c: &mut Criterion) {
    let params = PhantomParams::default();
    c.bench_function("gen_phantom_96x128", |bench| bench.iter(|| black_box(gen_phantom(&params, 3).unwrap())));
}

criterion_group!(benches, conv2d, unet_train_step, confusion, phantom);
criterion_main!(benches);
