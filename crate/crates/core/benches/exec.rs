//! Sequential vs data-parallel distillation gradients and evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use incdet_core::detector::DetectorModel;
use incdet_core::distill::{batch_gradients, DistillConfig, FrozenTeacher};
use incdet_core::eval::evaluate_model;
use incdet_core::exec::Exec;
use incdet_core::synth::{SceneConfig, Shape, ShapeCorpus};
use rand::SeedableRng;

fn bench_exec(c: &mut Criterion) {
    let shapes = [Shape::Square, Shape::Disc, Shape::Triangle, Shape::Cross];
    let data = ShapeCorpus::generate(&shapes, 4, &SceneConfig::default(), 0).full_dataset("b/");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let old_labels: Vec<String> = data.classes[..3].to_vec();
    let old = DetectorModel::new(Default::default(), old_labels, &mut rng).unwrap();
    let student = old.expand_class_head(&data.classes[3..], &mut rng).unwrap();
    let teacher = FrozenTeacher::new(old);
    let batch = data.remap_to(&student.labels).unwrap().samples;

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let cfg = DistillConfig { exec, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter(|| batch_gradients(&batch, &student, Some(&teacher), cfg).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate_model");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| evaluate_model(&student, &data, 0.05, 0.5, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_exec);
criterion_main!(benches);
