//! Sequential vs rayon execution of the data-parallel loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cxr_core::compress::{compress_model_with, CompressionConfig};
use cxr_core::dataset::{expand_with_augmentation_with, LabeledSet, Sample};
use cxr_core::imaging::AugmentConfig;
use cxr_core::nn::{onehot, ModelArtifact, Network, ValMetrics};
use cxr_core::par::Exec;
use cxr_core::saliency::occlusion_heatmap_with;
use cxr_core::synthetic::disc_dataset;
use cxr_core::metrics::Class;
use cxr_core::Tensor;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn batch_gradients(c: &mut Criterion) {
    let net = Network::reference(1);
    let samples = disc_dataset(8, 1);
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.to_example().input).collect();
    let batch = Tensor::stack(&inputs).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.class.index()).collect();
    let targets = onehot(&labels, 2);
    let mut g = c.benchmark_group("loss_and_gradients_batch8");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| net.loss_and_gradients(&batch, &targets, e).unwrap())
        });
    }
    g.finish();
}

fn heatmap(c: &mut Criterion) {
    let net = Network::reference(2);
    let scan = disc_dataset(1, 2).remove(0);
    let mut g = c.benchmark_group("occlusion_16x16_stride16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| occlusion_heatmap_with(&net, &scan.image, Class::Pneumonia, 16, 16, e).unwrap())
        });
    }
    g.finish();
}

fn compression(c: &mut Criterion) {
    let art = ModelArtifact::seal(&Network::reference(3), 1, None, ValMetrics::default());
    let mut g = c.benchmark_group("compress_reference");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| compress_model_with(&art, &CompressionConfig::default(), e, |n, _| Ok(n)).unwrap())
        });
    }
    g.finish();
}

fn augmentation(c: &mut Criterion) {
    let set = LabeledSet::train(disc_dataset(16, 4).into_iter().collect::<Vec<Sample>>());
    let cfg = AugmentConfig::default();
    let mut g = c.benchmark_group("augment_16x4");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| expand_with_augmentation_with(&set, &cfg, 4, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_gradients, heatmap, compression, augmentation);
criterion_main!(benches);
