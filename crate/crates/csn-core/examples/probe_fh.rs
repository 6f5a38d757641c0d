// Scratch decomposition probe for the three-subspace world.
use csn_core::datasets::{gen_fair_hier, FairHierConfig, Split};
use csn_core::losses::{AlignmentForm, AlignmentSpec, LossWeights};
use csn_core::metrics::{accuracy, rho};
use csn_core::training::{fit, init_model, ArchConfig, ConceptConfig, OptimizerConfig, TrainConfig};
use csn_core::Parallelism;

fn run(seed: u64, with_group: bool, parallel_w: f64, group_ce: f64, strength: f64, epochs: usize, kl: f64) -> (f64, f64) {
    let cfg = FairHierConfig { leaves: 8, groups: 2, identities: 8, identity_signal_strength: strength };
    let data = gen_fair_hier(2000, seed, &cfg).unwrap();
    let data = if with_group { data } else { data.select_tasks(&[0, 2]).unwrap() };
    let id_concept = if with_group { 2 } else { 1 };
    let mut cs = vec![ConceptConfig { classes: 8, prototypes_per_class: 1 }];
    if with_group {
        cs.push(ConceptConfig { classes: 2, prototypes_per_class: 1 });
    }
    cs.push(ConceptConfig { classes: 8, prototypes_per_class: 1 });
    let mut alignment = vec![AlignmentSpec { a: 0, b: id_concept, weight: 100.0, intercept: 0.0, form: AlignmentForm::Linear }];
    if with_group && parallel_w != 0.0 {
        alignment.push(AlignmentSpec { a: 0, b: 1, weight: parallel_w, intercept: 0.0, form: AlignmentForm::Linear });
    }
    let mut classification = vec![1.0];
    let mut kls = vec![kl];
    if with_group {
        classification.push(group_ce);
        kls.push(0.0); // no distributional regularization on the coarse task
    }
    classification.push(1.0);
    kls.push(kl);
    let arch = ArchConfig {
        input_dim: data.num_features(),
        latent_dim: 32,
        hidden: vec![128, 128],
        variational: kl != 0.0,
        decoder_final: csn_core::model::Activation::Identity,
    };
    let tcfg = TrainConfig {
        epochs,
        batch_size: 256,
        optimizer: OptimizerConfig::default(),
        seed,
        early_stopping: None,
        loss_weights: LossWeights {
            recon: 1.0,
            classification,
            kl: kls,
            alignment,
            pcn_w1: 0.05,
            pcn_w2: 0.05,
        },
        parallelism: Parallelism::Rayon,
    };
    let model = init_model(&arch, &cs, seed).unwrap();
    let m = fit(model, &data, &tcfg, None).unwrap().model;
    let xs = data.xs(Some(Split::Test));
    let mut leaf_pred = Vec::new();
    for x in &xs {
        leaf_pred.push(m.predict(x).unwrap()[0]);
    }
    let acc = accuracy(&leaf_pred, &data.task_labels(0, Some(Split::Test))).unwrap();
    let r = rho(&m, &data, Some(Split::Test), id_concept, 0, Parallelism::Rayon).unwrap();
    (acc, r)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let strength: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2.5);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(40);
    let kl: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let seeds: u64 = std::env::var("SEEDS").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let mean = |f: &dyn Fn(u64) -> (f64, f64)| {
        let mut a = 0.0;
        let mut r = 0.0;
        for s in 0..seeds {
            let (ai, ri) = f(s);
            a += ai;
            r += ri;
        }
        (a / seeds as f64, r / seeds as f64)
    };
    let cases: Vec<(&str, Box<dyn Fn(u64) -> (f64, f64)>)> = vec![
        ("fair-only (2 tasks)", Box::new(move |s| run(s, false, 0.0, 1.0, strength, epochs, kl))),
        ("fair + group ce3, no parallel", Box::new(move |s| run(s, true, 0.0, 3.0, strength, epochs, kl))),
        ("fair + group ce3, parallel -3", Box::new(move |s| run(s, true, -3.0, 3.0, strength, epochs, kl))),
        ("fair + group ce5, parallel -10", Box::new(move |s| run(s, true, -10.0, 5.0, strength, epochs, kl))),
    ];
    for (name, f) in &cases {
        let (a, r) = mean(&**f);
        println!("{name:32} leaf_acc={a:.3} rho={r:+.5}");
    }
}
