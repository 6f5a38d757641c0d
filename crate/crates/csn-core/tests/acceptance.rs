//! Acceptance suite: one test per headline capability, each printing a
//! single PASS/FAIL line. Criteria 1–4 reproduce published-dataset results
//! and require the data files on disk (see README, "Datasets"); they fail
//! with a pointer to the missing file when the data is not present.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::path::PathBuf;

use csn_core::datasets::{
    adult_schema, gen_weather, german_schema, load_idx, load_tabular, Dataset, Hierarchy, Split,
};
use csn_core::geometry::{alignment, build_subspace, orthogonal_component, project};
use csn_core::linalg::{dot, squared_distance, Mat};
use csn_core::losses::{
    gradient, kl_regularizer, total_loss, AlignmentForm, AlignmentSpec, LossWeights,
};
use csn_core::metrics::{accuracy, fairness_report, hierarchy_report, prototype_mst, rho, Taxonomy};
use csn_core::model::Activation;
use csn_core::training::{
    fit, init_model, ArchConfig, ConceptConfig, EarlyStopping, EarlyStopMetric, OptimizerConfig,
    TrainConfig,
};
use csn_core::Parallelism;

fn data_dir() -> PathBuf {
    match std::env::var_os("CSN_DATA_DIR") {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}

fn require_data(criterion: &str, rel: &str) -> PathBuf {
    let path = data_dir().join(rel);
    if !path.exists() {
        let msg = format!(
            "{criterion}: FAIL — required dataset file missing: {}. \
             Download the published file and place it there (or set CSN_DATA_DIR); \
             see README section 'Datasets'.",
            path.display()
        );
        println!("{msg}");
        panic!("{msg}");
    }
    path
}

fn fair_arch(input_dim: usize) -> ArchConfig {
    ArchConfig {
        input_dim,
        latent_dim: 32,
        hidden: vec![128, 128],
        variational: true,
        decoder_final: Activation::Identity,
    }
}

fn binary_concepts() -> [ConceptConfig; 2] {
    [
        ConceptConfig {
            classes: 2,
            prototypes_per_class: 1,
        },
        ConceptConfig {
            classes: 2,
            prototypes_per_class: 1,
        },
    ]
}

fn fair_weights(kl: f64, align: f64, class_w: [f64; 2]) -> LossWeights {
    LossWeights {
        recon: 1.0,
        classification: class_w.to_vec(),
        kl: vec![kl, kl],
        alignment: if align != 0.0 {
            vec![AlignmentSpec {
                a: 0,
                b: 1,
                weight: align,
                intercept: 0.0,
                form: AlignmentForm::Linear,
            }]
        } else {
            Vec::new()
        },
        pcn_w1: 0.05,
        pcn_w2: 0.05,
    }
}

struct FairRun {
    y_acc: f64,
    s_acc: f64,
    di: f64,
    dd05: f64,
    rho: f64,
}

fn train_fair(
    data: &Dataset,
    seed: u64,
    epochs: usize,
    batch: usize,
    weights: &LossWeights,
) -> FairRun {
    let arch = fair_arch(data.num_features());
    let variational = weights.kl.iter().any(|&k| k != 0.0);
    let arch = ArchConfig {
        variational,
        ..arch
    };
    let config = TrainConfig {
        epochs,
        batch_size: batch,
        optimizer: OptimizerConfig::default(),
        seed,
        early_stopping: None,
        loss_weights: weights.clone(),
        parallelism: Parallelism::Rayon,
    };
    let model = init_model(&arch, &binary_concepts(), seed).unwrap();
    let result = fit(model, data, &config, None).unwrap();
    assert!(result.diverged_at.is_none(), "training diverged");
    let report = fairness_report(
        &result.model,
        data,
        Split::Test,
        0,
        1,
        seed,
        Parallelism::Rayon,
    )
    .unwrap();
    FairRun {
        y_acc: report.y_acc,
        s_acc: report.s_acc,
        di: report.di,
        dd05: report.dd05,
        rho: report.rho,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_1_german_fairness() {
    let tag = "ACCEPTANCE C1 german-fairness";
    let path = require_data(tag, "german.data");
    let seeds = 20;
    let mut runs = Vec::new();
    for seed in 0..seeds {
        let data = load_tabular(&path, &german_schema(), seed).unwrap();
        assert_eq!(data.len(), 1000, "published credit file has 1000 rows");
        runs.push(train_fair(&data, seed, 30, 32, &fair_weights(0.5, 100.0, [1.0, 1.0])));
    }
    let y = mean(&runs.iter().map(|r| r.y_acc).collect::<Vec<_>>());
    let di = mean(&runs.iter().map(|r| r.di).collect::<Vec<_>>());
    let dd = mean(&runs.iter().map(|r| r.dd05).collect::<Vec<_>>());
    let rho_m = mean(&runs.iter().map(|r| r.rho).collect::<Vec<_>>());
    let pass = (0.69..=0.77).contains(&y) && di >= 0.58 && dd <= 0.19 && rho_m <= 0.02;
    println!(
        "{tag}: {} (mean over {seeds} seeds: y_acc={y:.3} [0.69,0.77], di={di:.3} >=0.58, \
         dd05={dd:.3} <=0.19, rho={rho_m:+.4} <=0.02)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_2_adult_fairness() {
    let tag = "ACCEPTANCE C2 adult-fairness";
    let path = require_data(tag, "adult.data");
    let seeds = 5;
    let mut runs = Vec::new();
    for seed in 0..seeds {
        let data = load_tabular(&path, &adult_schema(), seed).unwrap();
        runs.push(train_fair(&data, seed, 20, 128, &fair_weights(0.1, 100.0, [1.0, 0.1])));
    }
    let y = mean(&runs.iter().map(|r| r.y_acc).collect::<Vec<_>>());
    let s = mean(&runs.iter().map(|r| r.s_acc).collect::<Vec<_>>());
    let di = mean(&runs.iter().map(|r| r.di).collect::<Vec<_>>());
    let pass = (0.84..=0.86).contains(&y) && s <= 0.70 && di >= 0.78;
    println!(
        "{tag}: {} (mean over {seeds} seeds: y_acc={y:.3} [0.84,0.86], s_acc={s:.3} <=0.70, \
         di={di:.3} >=0.78)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_3_ablation_ordering() {
    let tag = "ACCEPTANCE C3 ablation-ordering";
    let path = require_data(tag, "german.data");
    let seeds = 5;
    let mut both = Vec::new();
    let mut neither = Vec::new();
    for seed in 0..seeds {
        let data = load_tabular(&path, &german_schema(), seed).unwrap();
        both.push(train_fair(&data, seed, 30, 32, &fair_weights(0.5, 100.0, [1.0, 1.0])));
        neither.push(train_fair(&data, seed, 30, 32, &fair_weights(0.0, 0.0, [1.0, 1.0])));
    }
    let rho_both = mean(&both.iter().map(|r| r.rho).collect::<Vec<_>>());
    let di_both = mean(&both.iter().map(|r| r.di).collect::<Vec<_>>());
    let di_neither = mean(&neither.iter().map(|r| r.di).collect::<Vec<_>>());
    let rho_neither = mean(&neither.iter().map(|r| r.rho).collect::<Vec<_>>());
    let y_both = mean(&both.iter().map(|r| r.y_acc).collect::<Vec<_>>());
    let y_neither = mean(&neither.iter().map(|r| r.y_acc).collect::<Vec<_>>());
    let pass = rho_both.abs() < 0.01
        && di_both >= di_neither
        && rho_neither >= 0.05
        && y_neither >= y_both - 0.03;
    println!(
        "{tag}: {} (kl+align: rho={rho_both:+.4} di={di_both:.3} y={y_both:.3}; \
         neither: rho={rho_neither:+.4} di={di_neither:.3} y={y_neither:.3})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

fn hierarchy_run(
    train_images: &str,
    train_labels: &str,
    test_images: &str,
    test_labels: &str,
    hierarchy: Hierarchy,
    tag: &str,
    seed: u64,
) -> csn_core::metrics::HierarchyReport {
    let ti = require_data(tag, train_images);
    let tl = require_data(tag, train_labels);
    let vi = require_data(tag, test_images);
    let vl = require_data(tag, test_labels);
    let train = load_idx(&ti, &tl, hierarchy).unwrap();
    let test = load_idx(&vi, &vl, hierarchy).unwrap();
    let data = Dataset::merge_train_test(train, test, 0.1, seed).unwrap();

    let coarse = hierarchy.coarse_classes().unwrap();
    let arch = ArchConfig {
        input_dim: data.num_features(),
        latent_dim: 32,
        hidden: vec![128, 128],
        variational: false,
        decoder_final: Activation::Sigmoid,
    };
    let concepts = [
        ConceptConfig {
            classes: 10,
            prototypes_per_class: 1,
        },
        ConceptConfig {
            classes: coarse,
            prototypes_per_class: 1,
        },
    ];
    let config = TrainConfig {
        epochs: 20,
        batch_size: 128,
        optimizer: OptimizerConfig::default(),
        seed,
        early_stopping: Some(EarlyStopping {
            patience: 10,
            metric: EarlyStopMetric::ValAccuracy,
        }),
        loss_weights: LossWeights {
            recon: 1.0,
            classification: vec![1.0, 1.0],
            kl: vec![0.0, 0.0],
            alignment: vec![AlignmentSpec {
                a: 0,
                b: 1,
                weight: -10.0,
                intercept: 0.0,
                form: AlignmentForm::Linear,
            }],
            pcn_w1: 0.05,
            pcn_w2: 0.05,
        },
        parallelism: Parallelism::Rayon,
    };
    let model = init_model(&arch, &concepts, seed).unwrap();
    let result = fit(model, &data, &config, None).unwrap();
    assert!(result.diverged_at.is_none());
    let tax = Taxonomy::two_level(coarse, hierarchy.group_map(10).unwrap()).unwrap();
    hierarchy_report(&result.model, &data, Split::Test, &tax, Parallelism::Rayon).unwrap()
}

#[test]
fn criterion_4_mnist_hierarchies() {
    let tag = "ACCEPTANCE C4 mnist-hierarchies";
    let seeds = 3u64;
    let mut d = Vec::new();
    let mut f = Vec::new();
    for seed in 0..seeds {
        d.push(hierarchy_run(
            "mnist/train-images-idx3-ubyte.gz",
            "mnist/train-labels-idx1-ubyte.gz",
            "mnist/t10k-images-idx3-ubyte.gz",
            "mnist/t10k-labels-idx1-ubyte.gz",
            Hierarchy::DigitParity,
            tag,
            seed,
        ));
        f.push(hierarchy_run(
            "fashion/train-images-idx3-ubyte.gz",
            "fashion/train-labels-idx1-ubyte.gz",
            "fashion/t10k-images-idx3-ubyte.gz",
            "fashion/t10k-labels-idx1-ubyte.gz",
            Hierarchy::FashionGroups,
            tag,
            seed,
        ));
    }
    let dm = |g: &dyn Fn(&csn_core::metrics::HierarchyReport) -> f64| {
        mean(&d.iter().map(|r| g(r)).collect::<Vec<_>>())
    };
    let fm = |g: &dyn Fn(&csn_core::metrics::HierarchyReport) -> f64| {
        mean(&f.iter().map(|r| g(r)).collect::<Vec<_>>())
    };
    let (d0, d1, dac, ded) = (
        dm(&|r| r.y0_acc),
        dm(&|r| r.y1_acc),
        dm(&|r| r.avg_cost),
        dm(&|r| r.edit_distance as f64),
    );
    let (f0, f1, fed) = (
        fm(&|r| r.y0_acc),
        fm(&|r| r.y1_acc),
        fm(&|r| r.edit_distance as f64),
    );
    let pass = d0 >= 0.95 && d1 >= 0.97 && dac <= 0.12 && ded <= 10.0
        && f0 >= 0.85 && f1 >= 0.96 && fed <= 8.0;
    println!(
        "{tag}: {} (digit: y0={d0:.3}>=0.95 y1={d1:.3}>=0.97 ac={dac:.3}<=0.12 ed={ded:.1}<=10; \
         fashion: y0={f0:.3}>=0.85 y1={f1:.3}>=0.96 ed={fed:.1}<=8)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

fn weather_config(seed: u64, intercept: f64) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 32,
        optimizer: OptimizerConfig::Sgd {
            lr: 0.03,
            momentum: 0.9,
        },
        seed,
        early_stopping: None,
        loss_weights: LossWeights {
            recon: 1.0,
            classification: vec![1.0, 1.0],
            kl: vec![0.0, 0.0],
            alignment: vec![AlignmentSpec {
                a: 0,
                b: 1,
                weight: 0.3,
                intercept,
                form: AlignmentForm::Squared,
            }],
            pcn_w1: 2.0,
            pcn_w2: 2.0,
        },
        parallelism: Parallelism::Rayon,
    }
}

fn weather_rho(seed: u64, intercept: f64) -> f64 {
    let data = gen_weather(1000, seed).unwrap();
    let arch = ArchConfig {
        input_dim: 2,
        latent_dim: 2,
        hidden: vec![64],
        variational: false,
        decoder_final: Activation::Sigmoid,
    };
    let model = init_model(&arch, &binary_concepts(), seed).unwrap();
    let result = fit(model, &data, &weather_config(seed, intercept), None).unwrap();
    assert!(result.diverged_at.is_none());
    rho(&result.model, &data, Some(Split::Test), 1, 0, Parallelism::Rayon).unwrap()
}

#[test]
fn criterion_5_weather_intercept() {
    let tag = "ACCEPTANCE C5 weather-intercept";
    let seeds = 10;
    let at_half: Vec<f64> = (0..seeds).map(|s| weather_rho(s, 0.5)).collect();
    let at_zero: Vec<f64> = (0..seeds).map(|s| weather_rho(s, 0.0)).collect();
    let m_half = mean(&at_half);
    let m_zero = mean(&at_zero);
    let pass = (0.45..=0.95).contains(&m_half) && m_zero < 0.05;
    println!(
        "{tag}: {} (intercept sqrt(0.5): mean rho={m_half:.3} in [0.45,0.95]; \
         intercept 0: mean rho={m_zero:+.4} < 0.05)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

struct FhRun {
    leaf_acc: f64,
    rho: f64,
    cond_ac: f64,
}

fn fair_hier_run(seed: u64, mode: &str) -> FhRun {
    let cfg = csn_core::datasets::FairHierConfig::default();
    let full = csn_core::datasets::gen_fair_hier(2000, seed, &cfg).unwrap();
    let (data, id_concept, with_group) = match mode {
        "fair-only" => (full.select_tasks(&[0, 2]).unwrap(), 1usize, false),
        _ => (full, 2usize, true),
    };
    let mut concepts = vec![ConceptConfig {
        classes: 8,
        prototypes_per_class: 1,
    }];
    if with_group {
        concepts.push(ConceptConfig {
            classes: 2,
            prototypes_per_class: 1,
        });
    }
    concepts.push(ConceptConfig {
        classes: 8,
        prototypes_per_class: 1,
    });

    let mut align = Vec::new();
    let mut kl = vec![0.0; concepts.len()];
    let mut classification = vec![1.0; concepts.len()];
    if mode != "unconstrained" {
        align.push(AlignmentSpec {
            a: 0,
            b: id_concept,
            weight: 100.0,
            intercept: 0.0,
            form: AlignmentForm::Linear,
        });
        kl[0] = 2.0;
        kl[id_concept] = 2.0;
    }
    if mode == "fair+hier" {
        align.push(AlignmentSpec {
            a: 0,
            b: 1,
            weight: -3.0,
            intercept: 0.0,
            form: AlignmentForm::Linear,
        });
        classification[1] = 3.0;
    }
    let variational = kl.iter().any(|&k| k != 0.0);
    let arch = ArchConfig {
        input_dim: data.num_features(),
        latent_dim: 32,
        hidden: vec![128, 128],
        variational,
        decoder_final: Activation::Identity,
    };
    let config = TrainConfig {
        epochs: 50,
        batch_size: 256,
        optimizer: OptimizerConfig::default(),
        seed,
        early_stopping: None,
        loss_weights: LossWeights {
            recon: 1.0,
            classification,
            kl,
            alignment: align,
            pcn_w1: 0.05,
            pcn_w2: 0.05,
        },
        parallelism: Parallelism::Rayon,
    };
    let model = init_model(&arch, &concepts, seed).unwrap();
    let result = fit(model, &data, &config, None).unwrap();
    assert!(result.diverged_at.is_none());
    let m = result.model;
    let xs = data.xs(Some(Split::Test));
    let leaf_true = data.task_labels(0, Some(Split::Test));
    let mut leaf_pred = Vec::new();
    for x in &xs {
        leaf_pred.push(m.predict(x).unwrap()[0]);
    }
    let tax = Taxonomy::two_level(2, (0..8).map(|l| l / 4).collect()).unwrap();
    FhRun {
        leaf_acc: accuracy(&leaf_pred, &leaf_true).unwrap(),
        rho: rho(&m, &data, Some(Split::Test), id_concept, 0, Parallelism::Rayon).unwrap(),
        cond_ac: csn_core::metrics::average_cost_errors_only(&leaf_pred, &leaf_true, &tax)
            .unwrap(),
    }
}

#[test]
fn criterion_6_fair_hierarchical_synthetic() {
    let tag = "ACCEPTANCE C6 fair+hier-synthetic";
    let seeds = 5;
    let collect = |mode: &str| -> (f64, f64, f64) {
        let runs: Vec<FhRun> = (0..seeds).map(|s| fair_hier_run(s, mode)).collect();
        (
            mean(&runs.iter().map(|r| r.leaf_acc).collect::<Vec<_>>()),
            mean(&runs.iter().map(|r| r.rho).collect::<Vec<_>>()),
            mean(&runs.iter().map(|r| r.cond_ac).collect::<Vec<_>>()),
        )
    };
    let (acc_u, _rho_u, _) = collect("unconstrained");
    let (acc_f, rho_f, ac_f) = collect("fair-only");
    let (acc_fh, rho_fh, ac_fh) = collect("fair+hier");
    let pass = rho_f.abs() < 0.01
        && acc_f < acc_u
        && acc_fh > acc_f
        && rho_fh.abs() < 0.01
        && ac_fh < ac_f;
    println!(
        "{tag}: {} (unconstrained acc={acc_u:.3}; fair-only acc={acc_f:.3} rho={rho_f:+.4} \
         cond_ac={ac_f:.3}; fair+hier acc={acc_fh:.3} rho={rho_fh:+.4} cond_ac={ac_fh:.3})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 7: fast property oracles
// ---------------------------------------------------------------------------

fn rand_mat(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    use rand::Rng;
    let mut m = Mat::zeros(rows, cols);
    for v in &mut m.data {
        *v = rng.random_range(lo..hi);
    }
    m
}

#[test]
fn criterion_7_property_suites() {
    use rand::{Rng, SeedableRng};
    let tag = "ACCEPTANCE C7 property-suites";
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);

    // Gradient vs central finite differences on 3 random architectures.
    let arch_shapes: [(usize, usize, usize, Vec<(usize, usize)>, bool); 3] = [
        (4, 5, 3, vec![(2, 1), (2, 1)], true),
        (5, 6, 4, vec![(3, 2), (2, 2)], true),
        (4, 5, 4, vec![(4, 1), (2, 1), (3, 1)], false),
    ];
    let mut max_rel = 0.0f64;
    for (input, hidden, latent, shapes, variational) in arch_shapes {
        let arch = ArchConfig {
            input_dim: input,
            latent_dim: latent,
            hidden: vec![hidden],
            variational,
            decoder_final: Activation::Sigmoid,
        };
        let concepts: Vec<ConceptConfig> = shapes
            .iter()
            .map(|&(classes, per)| ConceptConfig {
                classes,
                prototypes_per_class: per,
            })
            .collect();
        let mut model = init_model(&arch, &concepts, rng.random()).unwrap();
        // Nudge prototypes apart so the random model is not degenerate.
        for set in &mut model.concepts {
            for v in &mut set.prototypes.data {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let batch = 4;
        let xs_mat = rand_mat(&mut rng, batch, input, 0.0, 1.0);
        let xs: Vec<&[f64]> = (0..batch).map(|i| xs_mat.row(i)).collect();
        let labels: Vec<Vec<usize>> = model
            .concepts
            .iter()
            .map(|set| {
                (0..batch)
                    .map(|_| rng.random_range(0..set.num_classes))
                    .collect()
            })
            .collect();
        let mut weights = LossWeights {
            recon: 1.0,
            classification: vec![1.0; model.num_concepts()],
            kl: vec![if variational { 0.5 } else { 0.0 }; model.num_concepts()],
            alignment: vec![AlignmentSpec {
                a: 0,
                b: 1,
                weight: 7.0,
                intercept: 0.5,
                form: AlignmentForm::Squared,
            }],
            pcn_w1: 0.05,
            pcn_w2: 0.05,
        };
        if model.num_concepts() > 2 {
            weights.alignment.push(AlignmentSpec {
                a: 1,
                b: 2,
                weight: -4.0,
                intercept: 0.0,
                form: AlignmentForm::Linear,
            });
        }
        let (_, grads) =
            gradient(&model, &weights, &xs, &labels, Parallelism::Sequential).unwrap();
        let flat: Vec<Vec<f64>> = grads.param_slices().iter().map(|s| s.to_vec()).collect();
        let eps = 1e-5;
        for (s, gvec) in flat.iter().enumerate() {
            let picks: Vec<usize> = if gvec.len() <= 4 {
                (0..gvec.len()).collect()
            } else {
                (0..4).map(|_| rng.random_range(0..gvec.len())).collect()
            };
            for i in picks {
                let orig = model.param_slices_mut()[s][i];
                model.param_slices_mut()[s][i] = orig + eps;
                let lp = total_loss(&model, &weights, &xs, &labels, Parallelism::Sequential)
                    .unwrap()
                    .total;
                model.param_slices_mut()[s][i] = orig - eps;
                let lm = total_loss(&model, &weights, &xs, &labels, Parallelism::Sequential)
                    .unwrap()
                    .total;
                model.param_slices_mut()[s][i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let g = gvec[i];
                let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(1e-4);
                max_rel = max_rel.max(rel);
                assert!(rel < 1e-4, "gradient check: slice {s} coord {i} rel {rel}");
            }
        }
    }

    // Projection idempotence and orthogonality residuals.
    let mut max_resid = 0.0f64;
    for _ in 0..50 {
        let p = rand_mat(&mut rng, 4, 6, -2.0, 2.0);
        let s = build_subspace(&p).unwrap();
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let u = project(&z, &s).unwrap();
        let uu = project(&u, &s).unwrap();
        let idem: f64 = u
            .iter()
            .zip(&uu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(idem < 1e-6);
        let r = orthogonal_component(&z, &s).unwrap();
        for c in 0..s.rank() {
            let col: Vec<f64> = (0..6).map(|row| s.basis.at(row, c)).collect();
            let overlap = dot(&r, &col).abs();
            max_resid = max_resid.max(overlap);
            assert!(overlap < 1e-6);
        }
    }

    // Alignment bounds, symmetry, and the three analytic values.
    for _ in 0..50 {
        let s1 = build_subspace(&rand_mat(&mut rng, 3, 5, -2.0, 2.0)).unwrap();
        let s2 = build_subspace(&rand_mat(&mut rng, 4, 5, -2.0, 2.0)).unwrap();
        let a = alignment(&s1, &s2).unwrap();
        let b = alignment(&s2, &s1).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!((-1e-12..=1.0 + 1e-12).contains(&a));
    }
    let ex = |rows: &[Vec<f64>]| build_subspace(&Mat::from_rows(rows)).unwrap();
    let xaxis = ex(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    let xaxis2 = ex(&[vec![3.0, 5.0], vec![4.0, 5.0]]);
    let yaxis = ex(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
    let diag = ex(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
    assert!((alignment(&xaxis, &xaxis2).unwrap() - 1.0).abs() < 1e-9);
    assert!(alignment(&xaxis, &yaxis).unwrap().abs() < 1e-9);
    assert!((alignment(&xaxis, &diag).unwrap() - 0.5).abs() < 1e-9);

    // Softmax projection invariance and probability normalization.
    for _ in 0..50 {
        let protos = rand_mat(&mut rng, 3, 4, -2.0, 2.0);
        let s = build_subspace(&protos).unwrap();
        let arch = ArchConfig {
            input_dim: 4,
            latent_dim: 4,
            hidden: vec![4],
            variational: false,
            decoder_final: Activation::Sigmoid,
        };
        let mut model = init_model(
            &arch,
            &[ConceptConfig {
                classes: 3,
                prototypes_per_class: 1,
            }],
            0,
        )
        .unwrap();
        model.concepts[0].prototypes = protos;
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let direct = model.concept_distribution(&z, 0).unwrap();
        let projected = model
            .concept_distribution(&project(&z, &s).unwrap(), 0)
            .unwrap();
        for (a, b) in direct.iter().zip(&projected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((direct.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(direct.iter().all(|v| *v >= 0.0));
    }

    // MST optimality against full enumeration on 6 nodes (5 prototypes +
    // origin, 6^4 = 1296 spanning trees via Prüfer codes).
    for _ in 0..3 {
        let protos = rand_mat(&mut rng, 5, 2, -2.0, 2.0);
        let arch = ArchConfig {
            input_dim: 2,
            latent_dim: 2,
            hidden: vec![2],
            variational: false,
            decoder_final: Activation::Sigmoid,
        };
        let mut model = init_model(
            &arch,
            &[ConceptConfig {
                classes: 5,
                prototypes_per_class: 1,
            }],
            0,
        )
        .unwrap();
        model.concepts[0].prototypes = protos.clone();
        let mst = prototype_mst(&model).unwrap();
        let mut points: Vec<Vec<f64>> = (0..5).map(|r| protos.row(r).to_vec()).collect();
        points.push(vec![0.0, 0.0]);
        let mut best = f64::INFINITY;
        let n = 6usize;
        let mut seq = vec![0usize; n - 2];
        loop {
            let tree = prufer_decode(&seq, n);
            let total: f64 = tree
                .iter()
                .map(|&(u, v)| squared_distance(&points[u], &points[v]).sqrt())
                .sum();
            best = best.min(total);
            let mut i = 0;
            loop {
                if i == seq.len() {
                    break;
                }
                seq[i] += 1;
                if seq[i] < n {
                    break;
                }
                seq[i] = 0;
                i += 1;
            }
            if i == seq.len() {
                break;
            }
        }
        assert!(mst.total_length() <= best + 1e-9);
    }

    // KL non-negativity on random variational models.
    for trial in 0..10 {
        let arch = ArchConfig {
            input_dim: 3,
            latent_dim: 3,
            hidden: vec![6],
            variational: true,
            decoder_final: Activation::Sigmoid,
        };
        let model = init_model(
            &arch,
            &[ConceptConfig {
                classes: 2,
                prototypes_per_class: 2,
            }],
            trial,
        )
        .unwrap();
        let xs_mat = rand_mat(&mut rng, 4, 3, 0.0, 1.0);
        let xs: Vec<&[f64]> = (0..4).map(|i| xs_mat.row(i)).collect();
        let kl = kl_regularizer(&model, 0, &xs).unwrap();
        assert!(kl >= -1e-12, "kl {kl}");
    }

    println!(
        "{tag}: PASS (fd max rel err {max_rel:.2e} < 1e-4; residual overlap max \
         {max_resid:.2e} < 1e-6; alignment/softmax/mst/kl oracles hold)"
    );
}

fn prufer_decode(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    let mut seq = seq.to_vec();
    while !seq.is_empty() {
        let leaf = (0..n).find(|&i| degree[i] == 1).unwrap();
        let s = seq.remove(0);
        edges.push((leaf.min(s), leaf.max(s)));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    edges.push((rest[0].min(rest[1]), rest[0].max(rest[1])));
    edges
}

#[test]
fn criterion_8_out_of_scope_honesty() {
    let tag = "ACCEPTANCE C8 out-of-scope-honesty";
    // No criterion in this suite loads or asserts anything about CIFAR100;
    // the suite source itself is the witness.
    let source = include_str!("acceptance.rs");
    let mentions = source.matches("cifar").count() + source.matches("CIFAR").count();
    // Only this honesty check itself refers to the name.
    assert!(mentions <= 4, "unexpected references: {mentions}");
    println!("{tag}: PASS (no criterion depends on withheld experiments)");
}
