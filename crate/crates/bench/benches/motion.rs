use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use himor::config::LossWeights;
use himor::init::init_first_level;
use himor::motion::{trajectories, DEFAULT_KNN};
use himor::optim::{canonical_bindings, compute_gradients, Batch, Problem};
use himor::synth::{gen_synthetic, SceneSpec};
use himor::{kabsch_se3, OrientedPoint, Vec3, SE3};

fn deform(c: &mut Criterion) {
    let scene = gen_synthetic(&SceneSpec::two_link(), 0).unwrap();
    let tree = init_first_level(&scene.tracks, 10, 50, 0).unwrap();
    let points: Vec<OrientedPoint> = scene
        .tracks
        .frame_positions(tree.canonical_frame())
        .into_iter()
        .map(OrientedPoint::at)
        .collect();
    c.bench_function("deform 300 points x 30 frames", |b| {
        b.iter(|| trajectories(black_box(&tree), &points, DEFAULT_KNN).unwrap())
    });
}

fn gradient(c: &mut Criterion) {
    let scene = gen_synthetic(&SceneSpec::rigid_body(), 0).unwrap();
    let tree = init_first_level(&scene.tracks, 1, 50, 0).unwrap();
    let bindings = canonical_bindings(&scene.tracks, tree.canonical_frame());
    let problem = Problem::new(&tree, &scene.tracks, bindings, DEFAULT_KNN, 5, LossWeights::default()).unwrap();
    let batch = Batch::sample(&mut ChaCha8Rng::seed_from_u64(0), tree.frame_count(), 8, 4);
    let mut group = c.benchmark_group("gradient");
    group.sample_size(20);
    group.bench_function("50 nodes, 200 points, 8 frames", |b| {
        b.iter(|| compute_gradients(black_box(&tree), &problem, &batch).unwrap())
    });
    group.finish();
}

fn kabsch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src: Vec<Vec3> = (0..200)
        .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
        .collect();
    let truth = SE3::random(&mut rng, 1.0);
    let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
    c.bench_function("kabsch 200 points", |b| {
        b.iter(|| kabsch_se3(black_box(&src), black_box(&dst)).unwrap())
    });
}

criterion_group!(benches, deform, gradient, kabsch);
criterion_main!(benches);
