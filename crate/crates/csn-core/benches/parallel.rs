//! Rayon-chunked vs sequential execution of the batch-level hot paths:
//! loss-with-gradient evaluation and the latent-intervention metric.
//! Both modes produce bit-identical results; the interesting number is the
//! speedup of the chunked path as the batch grows.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use csn_core::datasets::gen_fair_hier;
use csn_core::datasets::FairHierConfig;
use csn_core::losses::{gradient, AlignmentForm, AlignmentSpec, LossWeights};
use csn_core::metrics::rho;
use csn_core::training::{init_model, ArchConfig, ConceptConfig};
use csn_core::{Mat, Parallelism};

fn bench_gradient(c: &mut Criterion) {
    let arch = ArchConfig {
        input_dim: 64,
        latent_dim: 32,
        hidden: vec![128, 128],
        variational: true,
        decoder_final: csn_core::model::Activation::Sigmoid,
    };
    let concepts = [
        ConceptConfig {
            classes: 10,
            prototypes_per_class: 1,
        },
        ConceptConfig {
            classes: 2,
            prototypes_per_class: 1,
        },
    ];
    let model = init_model(&arch, &concepts, 7).unwrap();
    let weights = LossWeights {
        recon: 1.0,
        classification: vec![1.0, 1.0],
        kl: vec![0.5, 0.5],
        alignment: vec![AlignmentSpec {
            a: 0,
            b: 1,
            weight: 100.0,
            intercept: 0.0,
            form: AlignmentForm::Linear,
        }],
        pcn_w1: 0.05,
        pcn_w2: 0.05,
    };

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut xs_store = Mat::zeros(512, 64);
    for v in &mut xs_store.data {
        *v = rng.random_range(0.0..1.0);
    }
    let labels_full: Vec<Vec<usize>> = vec![
        (0..512).map(|_| rng.random_range(0..10)).collect(),
        (0..512).map(|_| rng.random_range(0..2)).collect(),
    ];

    let mut group = c.benchmark_group("gradient");
    for &batch in &[32usize, 128, 512] {
        let xs: Vec<&[f64]> = (0..batch).map(|i| xs_store.row(i)).collect();
        let labels: Vec<Vec<usize>> = labels_full
            .iter()
            .map(|task| task[..batch].to_vec())
            .collect();
        group.throughput(Throughput::Elements(batch as u64));
        for (name, mode) in [
            ("sequential", Parallelism::Sequential),
            ("rayon", Parallelism::Rayon),
        ] {
            group.bench_with_input(BenchmarkId::new(name, batch), &batch, |b, _| {
                b.iter(|| {
                    let out =
                        gradient(black_box(&model), &weights, &xs, &labels, mode).unwrap();
                    black_box(out.0.total)
                })
            });
        }
    }
    group.finish();
}

fn bench_rho(c: &mut Criterion) {
    let cfg = FairHierConfig::default();
    let data = gen_fair_hier(2000, 3, &cfg).unwrap();
    let arch = ArchConfig {
        input_dim: data.num_features(),
        latent_dim: 16,
        hidden: vec![64],
        variational: false,
        decoder_final: csn_core::model::Activation::Identity,
    };
    let concepts = [
        ConceptConfig {
            classes: 8,
            prototypes_per_class: 1,
        },
        ConceptConfig {
            classes: 2,
            prototypes_per_class: 1,
        },
        ConceptConfig {
            classes: 8,
            prototypes_per_class: 1,
        },
    ];
    let model = init_model(&arch, &concepts, 5).unwrap();

    let mut group = c.benchmark_group("rho");
    for (name, mode) in [
        ("sequential", Parallelism::Sequential),
        ("rayon", Parallelism::Rayon),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let v = rho(black_box(&model), &data, None, 2, 0, mode).unwrap();
                black_box(v)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gradient, bench_rho);
criterion_main!(benches);
