//! The train / eval / export commands.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use csn_core::datasets::{Dataset, Split};
use csn_core::metrics::{
    accuracy, fairness_report, hierarchy_report, prototype_mst, rho, Taxonomy,
};
use csn_core::model::CsnModel;
use csn_core::training::{fit, init_model};
use csn_core::{CsnError, Parallelism};

use crate::config::{DatasetSpec, EvalSpec, RunConfig};

pub fn cmd_train(config_path: &Path) -> Result<(), CsnError> {
    let config = RunConfig::load(config_path)?;
    let out_dir = config.resolved_output_dir();
    fs::create_dir_all(&out_dir)?;

    let data = config.dataset.load(config.seed)?;
    let arch = config.architecture.with_input(data.num_features());
    let model = init_model(&arch, &config.concepts, config.seed)?;
    data.check_labels_for(&model)?;

    // Effective config next to the outputs, reloadable to reproduce.
    let effective = serde_json::to_string_pretty(&config)?;
    fs::write(out_dir.join("effective_config.json"), effective)?;

    let best_path = out_dir.join("best.json");
    let mut on_improve = |m: &CsnModel, _epoch: usize, _metric: f64| {
        let _ = m.save(&best_path);
    };
    let train_cfg = config.train_config();
    let result = fit(model, &data, &train_cfg, Some(&mut on_improve))?;

    write_history_csv(&out_dir.join("history.csv"), &result)?;
    result.model.save(&out_dir.join("model.json"))?;

    if let Some(epoch) = result.diverged_at {
        eprintln!("training diverged at epoch {epoch}; last finite checkpoint written");
        return Err(CsnError::Diverged {
            epoch,
            term: "training loss".into(),
        });
    }

    let metrics = evaluate_model(
        &result.model,
        &data,
        &config.eval,
        config.seed,
        train_cfg.parallelism,
    )?;
    let text = serde_json::to_string_pretty(&metrics)?;
    fs::write(out_dir.join("metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn write_history_csv(path: &Path, result: &csn_core::training::FitResult) -> Result<(), CsnError> {
    let mut f = File::create(path)?;
    let Some(first) = result.history.first() else {
        writeln!(f, "epoch,total,val_metric")?;
        return Ok(());
    };
    let mut header = vec!["epoch".to_string(), "recon".to_string()];
    for i in 0..first.loss.pcn.len() {
        header.push(format!("pcn_{i}"));
    }
    for i in 0..first.loss.kl.len() {
        header.push(format!("kl_{i}"));
    }
    for i in 0..first.loss.alignment.len() {
        header.push(format!("alignment_{i}"));
    }
    header.push("total".into());
    header.push("val_metric".into());
    writeln!(f, "{}", header.join(","))?;
    for rec in &result.history {
        let mut cells = vec![rec.epoch.to_string(), format!("{}", rec.loss.recon)];
        for v in &rec.loss.pcn {
            cells.push(format!("{v}"));
        }
        for v in &rec.loss.kl {
            cells.push(format!("{v}"));
        }
        for v in &rec.loss.alignment {
            cells.push(format!("{v}"));
        }
        cells.push(format!("{}", rec.loss.total));
        cells.push(rec.val_metric.map_or(String::new(), |v| format!("{v}")));
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Builds the metrics document for a trained model on its dataset.
pub fn evaluate_model(
    model: &CsnModel,
    data: &Dataset,
    eval: &EvalSpec,
    seed: u64,
    mode: Parallelism,
) -> Result<serde_json::Value, CsnError> {
    let xs = data.xs(Some(Split::Test));
    if xs.is_empty() {
        return Err(CsnError::EmptyInput("test split"));
    }
    let mut per_concept = Vec::new();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); model.num_concepts()];
    for x in &xs {
        let p = model.predict(x)?;
        for (task, &v) in p.iter().enumerate() {
            preds[task].push(v);
        }
    }
    for task in 0..model.num_concepts() {
        let truth = data.task_labels(task, Some(Split::Test));
        per_concept.push(accuracy(&preds[task], &truth)?);
    }

    let mut doc = json!({ "test_accuracy": per_concept });

    if let Some(f) = &eval.fair {
        let report = fairness_report(
            model,
            data,
            Split::Test,
            f.y_concept,
            f.s_concept,
            seed,
            mode,
        )?;
        doc["fair"] = serde_json::to_value(report)?;
    }
    if let Some(h) = &eval.hier {
        let tax = derive_two_level_taxonomy(data, h.fine_concept, h.coarse_concept)?;
        let report = hierarchy_report(model, data, Split::Test, &tax, mode)?;
        doc["hier"] = serde_json::to_value(report)?;
    }
    if !eval.rho_pairs.is_empty() {
        let mut rhos = serde_json::Map::new();
        for &(src, tgt) in &eval.rho_pairs {
            let v = rho(model, data, Some(Split::Test), src, tgt, mode)?;
            rhos.insert(format!("{src}->{tgt}"), json!(v));
        }
        doc["rho"] = serde_json::Value::Object(rhos);
    }
    Ok(doc)
}

/// Reads the fine→coarse map off the data; errors if any fine class maps
/// to two different coarse labels.
pub fn derive_two_level_taxonomy(
    data: &Dataset,
    fine_task: usize,
    coarse_task: usize,
) -> Result<Taxonomy, CsnError> {
    let fine_classes = data.class_counts[fine_task];
    let coarse_classes = data.class_counts[coarse_task];
    let mut map: Vec<Option<usize>> = vec![None; fine_classes];
    for i in 0..data.len() {
        let f = data.labels[fine_task][i];
        let c = data.labels[coarse_task][i];
        match map[f] {
            None => map[f] = Some(c),
            Some(prev) if prev != c => {
                return Err(CsnError::Dataset(format!(
                    "fine class {f} maps to both coarse {prev} and {c}; not a hierarchy"
                )))
            }
            _ => {}
        }
    }
    let group_of: Vec<usize> = map
        .into_iter()
        .enumerate()
        .map(|(f, m)| m.ok_or(CsnError::Dataset(format!("fine class {f} unobserved"))))
        .collect::<Result<_, _>>()?;
    Taxonomy::two_level(coarse_classes, group_of)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset_spec: &'a Path,
    pub fair: Option<(usize, usize)>,
    pub hier: Option<(usize, usize)>,
    pub rho: Vec<(usize, usize)>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs<'_>) -> Result<(), CsnError> {
    let model = CsnModel::load(args.checkpoint)?;
    let spec = load_dataset_spec(args.dataset_spec)?;
    let data = spec.load(args.seed)?;
    data.check_labels_for(&model)?;
    let eval = EvalSpec {
        fair: args.fair.map(|(y, s)| crate::config::FairEvalSpec {
            y_concept: y,
            s_concept: s,
        }),
        hier: args.hier.map(|(f, c)| crate::config::HierEvalSpec {
            fine_concept: f,
            coarse_concept: c,
        }),
        rho_pairs: args.rho.clone(),
    };
    let doc = evaluate_model(&model, &data, &eval, args.seed, Parallelism::Rayon)?;
    let text = serde_json::to_string_pretty(&doc)?;
    if let Some(out) = &args.out {
        fs::write(out, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn load_dataset_spec(path: &Path) -> Result<DatasetSpec, CsnError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CsnError::Config(format!("cannot read dataset spec {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CsnError::Config(format!("invalid dataset spec {}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Latents,
    Prototypes,
    DecodedPrototypes,
    Mst,
}

impl std::str::FromStr for ExportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latents" => Ok(ExportKind::Latents),
            "prototypes" => Ok(ExportKind::Prototypes),
            "decoded-prototypes" => Ok(ExportKind::DecodedPrototypes),
            "mst" => Ok(ExportKind::Mst),
            other => Err(format!(
                "unknown export kind '{other}' (latents, prototypes, decoded-prototypes, mst)"
            )),
        }
    }
}

pub struct ExportArgs<'a> {
    pub checkpoint: &'a Path,
    pub what: ExportKind,
    pub dataset_spec: Option<&'a Path>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_export(args: &ExportArgs<'_>) -> Result<(), CsnError> {
    let model = CsnModel::load(args.checkpoint)?;
    fs::create_dir_all(&args.out)?;
    match args.what {
        ExportKind::Latents => {
            let Some(spec_path) = args.dataset_spec else {
                return Err(CsnError::Config(
                    "--dataset is required for the latents export".into(),
                ));
            };
            let data = load_dataset_spec(spec_path)?.load(args.seed)?;
            let path = args.out.join("latents.csv");
            let mut f = File::create(&path)?;
            let mut header: Vec<String> =
                (0..model.latent_dim).map(|i| format!("z{i}")).collect();
            for t in 0..data.num_tasks() {
                header.push(format!("label_{t}"));
            }
            writeln!(f, "{}", header.join(","))?;
            for i in 0..data.len() {
                let (mu, _) = model.encode(data.x.row(i))?;
                let mut cells: Vec<String> = mu.iter().map(|v| format!("{v}")).collect();
                for t in 0..data.num_tasks() {
                    cells.push(data.labels[t][i].to_string());
                }
                writeln!(f, "{}", cells.join(","))?;
            }
            println!("wrote {}", path.display());
        }
        ExportKind::Prototypes => {
            let path = args.out.join("prototypes.csv");
            let mut f = File::create(&path)?;
            let mut header = vec!["concept".to_string(), "prototype".into(), "class".into()];
            header.extend((0..model.latent_dim).map(|i| format!("z{i}")));
            writeln!(f, "{}", header.join(","))?;
            for (ci, set) in model.concepts.iter().enumerate() {
                for j in 0..set.num_prototypes() {
                    let mut cells = vec![
                        ci.to_string(),
                        j.to_string(),
                        set.class_of[j].to_string(),
                    ];
                    cells.extend(set.prototypes.row(j).iter().map(|v| format!("{v}")));
                    writeln!(f, "{}", cells.join(","))?;
                }
            }
            println!("wrote {}", path.display());
        }
        ExportKind::DecodedPrototypes => {
            let path = args.out.join("decoded_prototypes.csv");
            let mut f = File::create(&path)?;
            let mut header = vec!["concept".to_string(), "prototype".into(), "class".into()];
            header.extend((0..model.input_dim).map(|i| format!("x{i}")));
            writeln!(f, "{}", header.join(","))?;
            for (ci, set) in model.concepts.iter().enumerate() {
                for j in 0..set.num_prototypes() {
                    let decoded = model.decode(set.prototypes.row(j))?;
                    let mut cells = vec![
                        ci.to_string(),
                        j.to_string(),
                        set.class_of[j].to_string(),
                    ];
                    cells.extend(decoded.iter().map(|v| format!("{v}")));
                    writeln!(f, "{}", cells.join(","))?;
                }
            }
            println!("wrote {}", path.display());
        }
        ExportKind::Mst => {
            let tree = prototype_mst(&model)?;
            let path = args.out.join("mst.csv");
            let mut f = File::create(&path)?;
            writeln!(f, "from,to,length")?;
            for (e, &(u, v)) in tree.edges.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},{}",
                    tree.node_names[u], tree.node_names[v], tree.lengths[e]
                )?;
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
