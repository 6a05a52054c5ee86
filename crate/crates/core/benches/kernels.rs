//! Sequential against parallel execution of the data-parallel kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use defnet::data::{generate_dataset, generate_proposals, group_proposals, GeneratorConfig, ProposalPolicy, SceneSpec};
use defnet::layers::{LossKind, LossTarget};
use defnet::network::{NetworkConfig, StagedNetwork};
use defnet::par::Exec;
use defnet::pipeline::{detect_batch, DetectOptions, DetectorModels, ImageInput};
use defnet::tensor::uniform;
use defnet::trainer::{batch_gradients, Sample};
use rand::SeedableRng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn batch_gradient(c: &mut Criterion) {
    let net = StagedNetwork::build(&NetworkConfig::default(), 1).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<Sample> = (0..32)
        .map(|i| Sample {
            input: uniform(&[3, 16, 16], &mut rng, 1.0),
            target: LossTarget::Index(i % 4),
        })
        .collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut g = c.benchmark_group("batch_gradients_32");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&net, black_box(&batch), LossKind::hinge(), exec).unwrap())
        });
    }
    g.finish();
}

fn detection(c: &mut Criterion) {
    let ds = generate_dataset(&GeneratorConfig::train_val(SceneSpec::default(), 8, 8, 3), Exec::Sequential).unwrap();
    let split = ds.split("val").unwrap();
    let props = group_proposals(&generate_proposals(&split.manifest, &ProposalPolicy::default(), 3).unwrap());
    let tensors: Vec<_> = split.images.iter().map(|i| i.to_tensor()).collect();
    let inputs: Vec<ImageInput<'_>> = split
        .images
        .iter()
        .zip(&tensors)
        .map(|(im, t)| ImageInput {
            image_id: im.id,
            image: t,
            proposals: &props[&im.id],
        })
        .collect();
    let net = StagedNetwork::build(&NetworkConfig::default(), 2).unwrap();
    let models = DetectorModels::scoring(&net);
    let opts = DetectOptions::scoring_only();
    let mut g = c.benchmark_group("detect_8_images");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| detect_batch(black_box(&inputs), &models, &opts, exec).unwrap())
        });
    }
    g.finish();
}

fn scene_generation(c: &mut Criterion) {
    let cfg = GeneratorConfig::train_val(SceneSpec::default(), 64, 16, 5);
    let mut g = c.benchmark_group("generate_80_scenes");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(black_box(&cfg), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_gradient, detection, scene_generation);
criterion_main!(benches);
