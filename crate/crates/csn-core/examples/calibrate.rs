// Scratch calibration harness (not part of the deliverable surface).
use csn_core::datasets::{gen_weather, Split};
use csn_core::geometry::{alignment, build_subspace};
use csn_core::losses::{AlignmentForm, AlignmentSpec, LossWeights};
use csn_core::metrics::rho;
use csn_core::model::argmax_lowest;
use csn_core::training::{fit, init_model, ArchConfig, ConceptConfig, OptimizerConfig, TrainConfig};
use csn_core::{Parallelism};

fn softmax_neg_local(d: &[f64]) -> Vec<f64> {
    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut out: Vec<f64> = d.iter().map(|v| (-(v - m)).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out { *v /= s; }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let weight: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100.0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let kl: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let intercept: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let lam_p: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let recon: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let batch: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(32);
    let w12: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    weather(weight, epochs, kl, intercept, lam_p, lr, recon, batch, w12);
}

fn weather(weight: f64, epochs: usize, kl: f64, intercept: f64, lam_p: f64, lr: f64, recon: f64, batch: usize, w12: f64) {
    let mut rhos = Vec::new();
    for seed in 0..10u64 {
        let data = gen_weather(1000, seed).unwrap();
        let arch = ArchConfig {
            input_dim: 2,
            latent_dim: 2,
            hidden: vec![64],
            variational: kl != 0.0,
            decoder_final: csn_core::model::Activation::Sigmoid,
        };
        let cs = [
            ConceptConfig { classes: 2, prototypes_per_class: 1 },
            ConceptConfig { classes: 2, prototypes_per_class: 1 },
        ];
        let cfg = TrainConfig {
            epochs,
            batch_size: batch,
            optimizer: if std::env::var("SGD").is_ok() {
                OptimizerConfig::Sgd { lr, momentum: 0.9 }
            } else {
                OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
            },
            seed,
            early_stopping: None,
            loss_weights: LossWeights {
                recon,
                classification: vec![lam_p, lam_p],
                kl: vec![kl, kl],
                alignment: vec![AlignmentSpec {
                    a: 0,
                    b: 1,
                    weight,
                    intercept,
                    form: AlignmentForm::Squared,
                }],
                pcn_w1: w12,
                pcn_w2: w12,
            },
            parallelism: Parallelism::Rayon,
        };
        let model = init_model(&arch, &cs, seed).unwrap();
        let r = fit(model, &data, &cfg, None).unwrap();
        let m = r.model;
        let s0 = build_subspace(&m.concepts[0].prototypes).unwrap();
        let s1 = build_subspace(&m.concepts[1].prototypes).unwrap();
        let a = alignment(&s0, &s1).unwrap();
        let rho_v = rho(&m, &data, Some(Split::Test), 1, 0, Parallelism::Rayon).unwrap();
        rhos.push(rho_v);

        // Per-sample ratio distribution.
        let xs_all = data.xs(Some(Split::Test));
        let src_l = data.task_labels(1, Some(Split::Test));
        let mut ratios = Vec::new();
        for i in 0..xs_all.len() {
            let (z, _) = m.encode(xs_all[i]).unwrap();
            let p_src = m.concept_distribution(&z, 1).unwrap();
            let p_tgt = m.concept_distribution(&z, 0).unwrap();
            let tgt_star = argmax_lowest(&p_tgt);
            let set = &m.concepts[1];
            let dists = m.distances(&z, 1).unwrap();
            // replicate the internal step
            let mut dist_grad = vec![0.0; dists.len()];
            // cross-entropy distance grad replicated via finite difference free form:
            let s = softmax_neg_local(&dists);
            let gy: f64 = s.iter().zip(&set.class_of).filter(|(_, &c)| c == src_l[i]).map(|(p, _)| p).sum();
            for (j, &pj) in s.iter().enumerate() {
                let ind = if set.class_of[j] == src_l[i] { 1.0 } else { 0.0 };
                dist_grad[j] = pj * (ind / gy - 1.0);
            }
            let mut z2 = z.clone();
            for (j, &g) in dist_grad.iter().enumerate() {
                let pr = set.prototypes.row(j);
                for r in 0..z2.len() { z2[r] += g * 2.0 * (z[r] - pr[r]); }
            }
            let p_src2 = m.concept_distribution(&z2, 1).unwrap();
            let p_tgt2 = m.concept_distribution(&z2, 0).unwrap();
            let ds = p_src2[src_l[i]] - p_src[src_l[i]];
            let dt = p_tgt2[tgt_star] - p_tgt[tgt_star];
            if ds.abs() >= 1e-8 { ratios.push(dt / ds); }
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |f: f64| ratios[((ratios.len() - 1) as f64 * f) as usize];
        if std::env::var("RATIOS").is_ok() { println!("   ratios: n={} min={:.3} q25={:.3} med={:.3} q75={:.3} max={:.3}",
            ratios.len(), q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)); }

        let xs = data.xs(Some(Split::Test));
        let src_labels = data.task_labels(1, Some(Split::Test));
        let mut details = Vec::new();
        for i in 0..2.min(xs.len()) {
            let (z, _) = m.encode(xs[i]).unwrap();
            let p_src = m.concept_distribution(&z, 1).unwrap();
            let p_tgt = m.concept_distribution(&z, 0).unwrap();
            let tgt_star = argmax_lowest(&p_tgt);
            details.push(format!(
                "sp={:.3} tp={:.3}",
                p_src[src_labels[i]], p_tgt[tgt_star]
            ));
        }
        println!("seed {seed}: align={a:.4} rho={rho_v:.4} | {}", details.join(";"));
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let sd = (rhos.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rhos.len() as f64).sqrt();
    println!("MEAN rho = {mean:.4} +- {sd:.4}");
}
