use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ipt::degradations::{synthetic_scene, DegradationKind};
use ipt::imaging::{extract_patches, ImageBuffer, DEFAULT_OVERLAP, DEFAULT_PATCH};
use ipt::model::{IptModel, ModelConfig, TaskSpec};
use ipt::parallel::{par_map_range, seq_map_range};

fn model() -> IptModel {
    let tasks = vec![TaskSpec::new("noise30".parse::<DegradationKind>().unwrap())];
    IptModel::new(ModelConfig::desk(tasks), 0).unwrap()
}

fn restore_patches(c: &mut Criterion) {
    let m = model();
    let img = synthetic_scene(96, 96, 1);
    let (_, patches) = extract_patches(&img, DEFAULT_PATCH, DEFAULT_OVERLAP).unwrap();
    let run = |i: usize| {
        let x = ImageBuffer::batch_to_tensor(std::slice::from_ref(&patches[i])).unwrap();
        m.infer(&x, "noise30").unwrap()
    };
    let mut g = c.benchmark_group("tiled_inference");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("rayon", patches.len()), |b| b.iter(|| par_map_range(patches.len(), run)));
    g.bench_function(BenchmarkId::new("sequential", patches.len()), |b| {
        b.iter(|| seq_map_range(patches.len(), run))
    });
    g.finish();
}

fn degrade_images(c: &mut Criterion) {
    let images: Vec<ImageBuffer> = (0..8).map(|i| synthetic_scene(128, 128, i)).collect();
    let kinds: Vec<DegradationKind> = ["sr4", "noise50", "rain"].iter().map(|t| t.parse().unwrap()).collect();
    let n = images.len() * kinds.len();
    let run = |i: usize| kinds[i % kinds.len()].apply(&images[i / kinds.len()], i as u64).unwrap();
    let mut g = c.benchmark_group("synthesis");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("rayon", n), |b| b.iter(|| par_map_range(n, run)));
    g.bench_function(BenchmarkId::new("sequential", n), |b| b.iter(|| seq_map_range(n, run)));
    g.finish();
}

criterion_group!(benches, restore_patches, degrade_images);
criterion_main!(benches);
