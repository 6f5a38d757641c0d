// Scratch telemetry: evolution of subspace geometry during weather training.
use csn_core::datasets::{gen_weather, Split};
use csn_core::geometry::{alignment, build_subspace};
use csn_core::losses::{AlignmentForm, AlignmentSpec, LossWeights};
use csn_core::metrics::rho;
use csn_core::training::{fit, init_model, ArchConfig, ConceptConfig, OptimizerConfig, TrainConfig};
use csn_core::Parallelism;

fn main() {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let weight: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let data = gen_weather(1000, seed).unwrap();
    let arch = ArchConfig {
        input_dim: 2,
        latent_dim: 2,
        hidden: vec![64],
        variational: false,
        decoder_final: csn_core::model::Activation::Sigmoid,
    };
    let cs = [
        ConceptConfig { classes: 2, prototypes_per_class: 1 },
        ConceptConfig { classes: 2, prototypes_per_class: 1 },
    ];
    let mut model = init_model(&arch, &cs, seed).unwrap();
    for stage in 0..20 {
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 32,
            optimizer: OptimizerConfig::Adam { lr: 0.003, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            seed: seed + stage,
            early_stopping: None,
            loss_weights: LossWeights {
                recon: 1.0,
                classification: vec![1.0, 1.0],
                kl: vec![0.0, 0.0],
                alignment: vec![AlignmentSpec { a: 0, b: 1, weight, intercept: 0.5, form: AlignmentForm::Squared }],
                pcn_w1: 0.05,
                pcn_w2: 0.05,
            },
            parallelism: Parallelism::Rayon,
        };
        let r = fit(model, &data, &cfg, None).unwrap();
        model = r.model;
        let s0 = build_subspace(&model.concepts[0].prototypes).unwrap();
        let s1 = build_subspace(&model.concepts[1].prototypes).unwrap();
        let a = alignment(&s0, &s1).unwrap();
        // Directed difference vectors: class1 − class0 per task.
        let p0 = &model.concepts[0].prototypes;
        let p1 = &model.concepts[1].prototypes;
        let d0: Vec<f64> = (0..2).map(|c| p0.at(1, c) - p0.at(0, c)).collect();
        let d1: Vec<f64> = (0..2).map(|c| p1.at(1, c) - p1.at(0, c)).collect();
        let n0 = (d0[0] * d0[0] + d0[1] * d0[1]).sqrt();
        let n1 = (d1[0] * d1[0] + d1[1] * d1[1]).sqrt();
        let cosd = (d0[0] * d1[0] + d0[1] * d1[1]) / (n0 * n1);
        // Blob axis: mean hot z minus mean cold z.
        let xs = data.xs(Some(Split::Train));
        let hot = data.task_labels(0, Some(Split::Train));
        let mut mh = [0.0; 2];
        let mut mc = [0.0; 2];
        let (mut nh, mut nc) = (0.0, 0.0);
        for (x, &h) in xs.iter().zip(&hot) {
            let (z, _) = model.encode(x).unwrap();
            if h == 1 { mh[0] += z[0]; mh[1] += z[1]; nh += 1.0; }
            else { mc[0] += z[0]; mc[1] += z[1]; nc += 1.0; }
        }
        let w = [mh[0] / nh - mc[0] / nc, mh[1] / nh - mc[1] / nc];
        let nw = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let cos0w = (d0[0] * w[0] + d0[1] * w[1]) / (n0 * nw);
        let cos1w = -(d1[0] * w[0] + d1[1] * w[1]) / (n1 * nw); // rainy−sunny vs w: negate to get sunny-direction overlap
        let rho_v = rho(&model, &data, Some(Split::Test), 1, 0, Parallelism::Rayon).unwrap_or(f64::NAN);
        println!(
            "ep{:3}: align={a:.3} cos(d0,d1)={cosd:+.3} |d0|={n0:.2} |d1|={n1:.2} cos(hot,w)={cos0w:+.3} cos(sunny,w)={cos1w:+.3} blob_sep={nw:.2} rho={rho_v:+.3}",
            (stage + 1) * 5
        );
    }
}
