use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use esa_reid::config::ExperimentConfig;
use esa_reid::descfile::DescriptorRecord;
use esa_reid::eval::{evaluate_retrieval, MetricReport, ScoreMatrix};
use esa_reid::model::InputImage;
use esa_reid::segmap::{dynamic_unconfident_mask, entropy_map, unconfident_mask};
use esa_reid::synthdata::{identities, render_indexed};
use esa_reid::{
    build_descriptor, extended_distance, pairwise_extended_distances, DistanceConfig, DistanceKind, FeatureKind,
    FeatureMap, Model, PersonDescriptor, SemanticProbMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(cfg: &ExperimentConfig, n: usize) -> Vec<InputImage> {
    let specs = identities(&cfg.data);
    (0..n).map(|i| render_indexed(&cfg.data, &specs[i % specs.len()], i).image).collect()
}

fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> SemanticProbMap {
    let probs = (0..h * w)
        .flat_map(|_| {
            let e: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0f64..4.0).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect();
    SemanticProbMap::new(h, w, n, probs).unwrap()
}

fn random_descriptor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> PersonDescriptor {
    let probs = random_probs(rng, h, w, 8);
    let data = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features = FeatureMap::new(h, w, c, FeatureKind::Reduced, data).unwrap();
    build_descriptor(&features, &probs, 0.5).unwrap()
}

fn forward(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let model = Model::new(cfg.model()).unwrap();
    let batch = images(&cfg, 16);
    c.bench_function("model/forward_16", |b| b.iter(|| model.forward(black_box(&batch)).unwrap()));
}

fn masks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probs = random_probs(&mut rng, 12, 4, 8);
    c.bench_function("segmap/entropy_12x4", |b| b.iter(|| entropy_map(black_box(&probs))));
    let e = entropy_map(&probs);
    c.bench_function("segmap/fixed_mask", |b| b.iter(|| unconfident_mask(black_box(&e), 0.5).unwrap()));
    c.bench_function("segmap/dynamic_mask", |b| b.iter(|| dynamic_unconfident_mask(black_box(&e))));
}

fn distances(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<PersonDescriptor> = (0..16).map(|_| random_descriptor(&mut rng, 12, 4, 32)).collect();
    let cfg = DistanceConfig::default();
    c.bench_function("align/build_descriptor", |b| {
        b.iter_batched(|| rng.clone(), |mut r| random_descriptor(&mut r, 12, 4, 32), BatchSize::SmallInput)
    });
    c.bench_function("align/extended_distance", |b| {
        b.iter(|| extended_distance(black_box(&batch[0]), black_box(&batch[1]), &cfg).unwrap())
    });
    c.bench_function("align/pairwise_16", |b| b.iter(|| pairwise_extended_distances(black_box(&batch), &cfg).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n_probe, n_gallery) = (200, 100);
    let distances: Vec<f64> = (0..n_probe * n_gallery).map(|_| rng.random()).collect();
    let gallery_ids: Vec<i64> = (0..n_gallery as i64).map(|g| g % 25).collect();
    let probe_ids: Vec<i64> = (0..n_probe as i64).map(|p| p % 25).collect();
    let scores = ScoreMatrix::from_distances(&distances, probe_ids, gallery_ids).unwrap();
    c.bench_function("eval/metrics_200x100", |b| b.iter(|| MetricReport::compute(black_box(&scores), 20).unwrap()));

    let record = |i: usize, rng: &mut ChaCha8Rng| DescriptorRecord {
        image_id: format!("{i}"),
        identity: (i % 25) as i64,
        descriptor: random_descriptor(rng, 12, 4, 32),
    };
    let gallery: Vec<DescriptorRecord> = (0..100).map(|i| record(i, &mut rng)).collect();
    let probe: Vec<DescriptorRecord> = (0..200).map(|i| record(i, &mut rng)).collect();
    let cfg = DistanceConfig::default();
    c.bench_function("eval/retrieval_200x100", |b| {
        b.iter(|| evaluate_retrieval(black_box(&gallery), black_box(&probe), DistanceKind::Extended, &cfg, 20).unwrap())
    });
}

criterion_group!(benches, forward, masks, distances, metrics);
criterion_main!(benches);
