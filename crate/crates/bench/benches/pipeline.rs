use std::hint::black_box;

use anchorseg::agmd::fuse_and_binarize;
use anchorseg::instruct::DEFAULT_INSTRUCTION;
use anchorseg::metrics::{average_precision, f1_max};
use anchorseg::model::ImageFeatures;
use anchorseg::synth::{generate_sample, ssim, Category, Split};
use anchorseg::Graph;
use anchorseg_bench::model_fixture;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(c: &mut Criterion) {
    let f = model_fixture();
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("forward_decode", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let out = f.model.forward(&mut g, &f.store, &f.features, &f.dialogue.ids, true).unwrap();
            black_box(out.heads.is_some())
        })
    });
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let out = f.model.forward(&mut g, &f.store, &f.features, &f.dialogue.ids, true).unwrap();
            let l = g.sum(out.logits);
            black_box(g.backward(l).unwrap())
        })
    });
    group.bench_function("respond_16_tokens", |b| {
        b.iter(|| black_box(f.model.respond(&f.store, &f.features, DEFAULT_INSTRUCTION, 16, 0.5).unwrap()))
    });
    group.finish();

    let img = generate_sample(Category::Speckle, Split::Seen, 3, 1).image;
    c.bench_function("encode_image", |b| b.iter(|| black_box(ImageFeatures::encode(&f.encoders, &img).unwrap())));
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100 * 64 * 64;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
    c.bench_function("average_precision_409600", |b| b.iter(|| black_box(average_precision(&scores, &labels).unwrap())));
    c.bench_function("f1_max_409600", |b| b.iter(|| black_box(f1_max(&scores, &labels).unwrap())));

    let seg: Vec<f64> = (0..256).map(|_| rng.random()).collect();
    let ano: Vec<f64> = (0..256).map(|_| rng.random()).collect();
    c.bench_function("fuse_upsample_binarize", |b| {
        b.iter(|| black_box(fuse_and_binarize(Some(&seg), Some(&ano), 0.5, 16, 4)))
    });

    let a = generate_sample(Category::Stripes, Split::Seen, 0, 1).image;
    let bimg = generate_sample(Category::Stripes, Split::Seen, 2, 1).image;
    c.bench_function("ssim_64", |b| b.iter(|| black_box(ssim(&a, &bimg).unwrap())));
}

criterion_group!(benches, model, metrics);
criterion_main!(benches);
