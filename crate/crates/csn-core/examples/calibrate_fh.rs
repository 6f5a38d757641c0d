// Scratch calibration for the three-subspace synthetic world.
use csn_core::datasets::{gen_fair_hier, FairHierConfig, Split};
use csn_core::losses::{AlignmentForm, AlignmentSpec, LossWeights};
use csn_core::metrics::{accuracy, average_cost_errors_only, rho, Taxonomy};
use csn_core::training::{fit, init_model, ArchConfig, ConceptConfig, OptimizerConfig, TrainConfig};
use csn_core::Parallelism;

#[derive(Clone, Copy)]
enum Mode {
    Unconstrained,
    FairOnly,
    FairHier,
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let strength: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);
    let kl: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);

    for mode in [Mode::Unconstrained, Mode::FairOnly, Mode::FairHier] {
        let name = match mode {
            Mode::Unconstrained => "unconstrained",
            Mode::FairOnly => "fair-only",
            Mode::FairHier => "fair+hier",
        };
        let mut accs = Vec::new();
        let mut rhos = Vec::new();
        let mut acs = Vec::new();
        let mut gaccs = Vec::new();
        for seed in 0..seeds {
            let base_cfg = FairHierConfig {
                leaves: 8,
                groups: 2,
                identities: 8,
                identity_signal_strength: strength,
            };
            let data = gen_fair_hier(n, seed, &base_cfg).unwrap();
            let arch = ArchConfig {
                input_dim: data.num_features(),
                latent_dim: 32,
                hidden: vec![128, 128],
                variational: kl != 0.0,
                decoder_final: csn_core::model::Activation::Identity,
            };
            // fair-only drops the group concept entirely: tasks (leaf, identity).
            let with_group = !matches!(mode, Mode::FairOnly);
            let data = if with_group { data } else { data.select_tasks(&[0, 2]).unwrap() };
            let id_concept = if with_group { 2 } else { 1 };
            let mut cs = vec![ConceptConfig { classes: 8, prototypes_per_class: 1 }];
            if with_group {
                cs.push(ConceptConfig { classes: 2, prototypes_per_class: 1 });
            }
            cs.push(ConceptConfig { classes: 8, prototypes_per_class: 1 });
            let mut alignment = Vec::new();
            if matches!(mode, Mode::FairOnly | Mode::FairHier) {
                alignment.push(AlignmentSpec { a: 0, b: id_concept, weight: 100.0, intercept: 0.0, form: AlignmentForm::Linear });
            }
            let group_ce: f64 = std::env::var("GROUP_CE").ok().and_then(|v| v.parse().ok()).unwrap_or(3.0);
            if matches!(mode, Mode::FairHier) {
                let hw: f64 = std::env::var("HIER_W").ok().and_then(|v| v.parse().ok()).unwrap_or(-3.0);
                alignment.push(AlignmentSpec { a: 0, b: 1, weight: hw, intercept: 0.0, form: AlignmentForm::Linear });
            }
            let kl_w = if matches!(mode, Mode::Unconstrained) { 0.0 } else { kl };
            let tcfg = TrainConfig {
                epochs,
                batch_size: 256,
                optimizer: OptimizerConfig::default(),
                seed,
                early_stopping: None,
                loss_weights: LossWeights {
                    recon: 1.0,
                    classification: if with_group { vec![1.0, group_ce, 1.0] } else { vec![1.0, 1.0] },
                    kl: if with_group { vec![kl_w, 0.0, kl_w] } else { vec![kl_w, kl_w] },
                    alignment,
                    pcn_w1: 0.05,
                    pcn_w2: 0.05,
                },
                parallelism: Parallelism::Rayon,
            };
            let arch2 = ArchConfig { variational: kl_w != 0.0, ..arch.clone() };
            let model = init_model(&arch2, &cs, seed).unwrap();
            let r = fit(model, &data, &tcfg, None).unwrap();
            let m = r.model;

            let xs = data.xs(Some(Split::Test));
            let mut leaf_pred = Vec::new();
            let mut group_pred = Vec::new();
            for x in &xs {
                let p = m.predict(x).unwrap();
                leaf_pred.push(p[0]);
                if with_group {
                    group_pred.push(p[1]);
                }
            }
            let leaf_true = data.task_labels(0, Some(Split::Test));
            let gacc = if with_group {
                let group_true = data.task_labels(1, Some(Split::Test));
                accuracy(&group_pred, &group_true).unwrap()
            } else {
                f64::NAN
            };
            let acc = accuracy(&leaf_pred, &leaf_true).unwrap();
            let rho_v = rho(&m, &data, Some(Split::Test), id_concept, 0, Parallelism::Rayon).unwrap();
            let tax = Taxonomy::two_level(2, (0..8).map(|l| l / 4).collect()).unwrap();
            let ac = average_cost_errors_only(&leaf_pred, &leaf_true, &tax).unwrap();
            accs.push(acc);
            rhos.push(rho_v);
            acs.push(ac);
            gaccs.push(gacc);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{name:14} leaf_acc={:.3} group_acc={:.3} rho={:+.5} cond_ac={:.3}   (per-seed acc: {:?})",
            mean(&accs),
            mean(&gaccs),
            mean(&rhos),
            mean(&acs),
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
