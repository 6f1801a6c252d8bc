use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tassel_core::train::{prepare_all, sample_gradients};
use tassel_core::{
    normalize, Branch, Graph, ModelConfig, RedundantCountMap, SynthConfig, TasselModel, Tensor, TrainConfig,
    WindowGeometry,
};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::uniform(&[68, 64], 1.0, &mut rng);
    let b = Tensor::uniform(&[64, 256], 1.0, &mut rng);
    c.bench_function("matmul 68x64x256", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            black_box(g.matmul(x, y).unwrap());
        })
    });
}

fn normalizer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [32, 128] {
        let geom = WindowGeometry::new(k, 16, 16, (24, 24)).unwrap();
        let values = (0..geom.len()).map(|_| rng.gen_range(0.0..3.0)).collect();
        let r = RedundantCountMap::new(values, geom, Branch(0)).unwrap();
        c.bench_function(&format!("normalize 24x24 k={k}"), |bench| bench.iter(|| black_box(normalize(&r))));
    }
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let model = TasselModel::new(cfg.clone(), 2).unwrap();
    let scene = tassel_core::synth::synth_scene(&SynthConfig::default(), 0).unwrap();
    let (s, ex) = prepare_all(&[scene], &cfg).unwrap();
    let (s, ex) = (&s[0], &ex[0]);
    c.bench_function("tiny predict", |bench| {
        bench.iter(|| black_box(model.predict(&s.raster, ex).unwrap()))
    });
    let tc = TrainConfig::tiny();
    c.bench_function("tiny forward+backward", |bench| {
        bench.iter(|| black_box(sample_gradients(&model, &tc, &s.raster, &s.ann.points, ex).unwrap()))
    });
}

criterion_group!(benches, matmul, normalizer, model);
criterion_main!(benches);
