use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nullport::objectives::{teleport_gradient_full, BatchObjective};
use nullport::symmetry::symmetry_teleport_step;
use nullport::teleport::teleport_step;
use nullport::{
    build_all_bases, thin_svd, Activation, Batch, LossKind, MlpSpec, ModelGraph, SeededRng, Targets, TeleportConfig,
};

fn mlp(d: usize, n: usize) -> (ModelGraph, Batch) {
    let mut rng = SeededRng::new(7);
    let model = MlpSpec {
        input_dim: d,
        hidden: vec![d, d],
        output_dim: 10,
        activation: Activation::LeakyRelu { alpha: 0.1 },
    }
    .build(&mut rng)
    .unwrap();
    let batch = Batch {
        inputs: rng.normal(&[n, d]),
        targets: Targets::Classes {
            labels: (0..n).map(|_| rng.below(10)).collect(),
            classes: 10,
        },
    };
    (model, batch)
}

fn svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("thin_svd");
    for d in [64, 256, 512] {
        let a = SeededRng::new(1).normal(&[d + 1, 32]);
        group.bench_with_input(BenchmarkId::from_parameter(d), &a, |b, a| b.iter(|| thin_svd(black_box(a)).unwrap()));
    }
    group.finish();
}

fn bases(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_all_bases");
    for d in [64, 256] {
        let (model, batch) = mlp(d, 32);
        let trace = model.forward(&batch.inputs).unwrap();
        group.bench_function(BenchmarkId::from_parameter(d), |b| {
            b.iter(|| build_all_bases(&model, &trace, 1.0).unwrap())
        });
    }
    group.finish();
}

fn hvp(c: &mut Criterion) {
    let mut group = c.benchmark_group("teleport_gradient");
    for d in [64, 256] {
        let (mut model, batch) = mlp(d, 32);
        group.bench_function(BenchmarkId::from_parameter(d), |b| {
            b.iter(|| {
                let mut obj = BatchObjective {
                    model: &mut model,
                    batch: &batch,
                    kind: LossKind::CrossEntropy,
                };
                teleport_gradient_full(&mut obj, 1e-6).unwrap()
            })
        });
    }
    group.finish();
}

fn steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("teleport_step");
    let cfg = TeleportConfig {
        eta: 1e-3,
        cap: f64::INFINITY,
        ..TeleportConfig::default()
    };
    for d in [64, 256] {
        let (mut model, batch) = mlp(d, 32);
        let trace = model.forward(&batch.inputs).unwrap();
        let bases = build_all_bases(&model, &trace, 1.0).unwrap();
        group.bench_function(BenchmarkId::new("nullspace", d), |b| {
            b.iter(|| teleport_step(&mut model, &bases, &batch, LossKind::CrossEntropy, &cfg).unwrap())
        });
        let (mut model, batch) = mlp(d, 32);
        group.bench_function(BenchmarkId::new("symmetry", d), |b| {
            b.iter(|| symmetry_teleport_step(&mut model, &batch, LossKind::CrossEntropy, 1e-3, f64::INFINITY, 1e-6).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = svd, bases, hvp, steps
}
criterion_main!(benches);
