//! Run configuration: one JSON document describing dataset, architecture,
//! concepts, training, loss weights, and which evaluations to emit.
//!
//! The effective configuration (all defaults filled in) is written next to
//! every run's outputs and can be fed back to `csn train` to reproduce it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use csn_core::datasets::{
    adult_schema, gen_fair_hier, gen_weather, german_schema, load_idx, load_tabular, Dataset,
    FairHierConfig, Hierarchy, TabularSchema,
};
use csn_core::losses::LossWeights;
use csn_core::model::Activation;
use csn_core::training::{ArchConfig, ConceptConfig, EarlyStopping, OptimizerConfig, TrainConfig};
use csn_core::{CsnError, Parallelism};

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "CSN_OUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Tabular {
        path: PathBuf,
        schema: SchemaRef,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        hierarchy: Hierarchy,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    Weather {
        n: usize,
    },
    FairHier {
        n: usize,
        #[serde(flatten)]
        config: FairHierConfig,
    },
}

fn default_val_fraction() -> f64 {
    0.1
}

/// Either a named built-in schema or an inline one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaRef {
    Named(String),
    Inline(Box<TabularSchema>),
}

impl SchemaRef {
    pub fn resolve(&self) -> Result<TabularSchema, CsnError> {
        match self {
            SchemaRef::Inline(s) => Ok((**s).clone()),
            SchemaRef::Named(name) => match name.as_str() {
                "german" => Ok(german_schema()),
                "adult" => Ok(adult_schema()),
                other => Err(CsnError::Config(format!(
                    "unknown schema '{other}' (built-ins: german, adult)"
                ))),
            },
        }
    }
}

impl DatasetSpec {
    /// Loads or generates the dataset. `seed` drives splits and generators.
    pub fn load(&self, seed: u64) -> Result<Dataset, CsnError> {
        match self {
            DatasetSpec::Tabular { path, schema } => {
                if !path.exists() {
                    return Err(CsnError::Config(format!(
                        "dataset file not found: {}",
                        path.display()
                    )));
                }
                load_tabular(path, &schema.resolve()?, seed)
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                hierarchy,
                val_fraction,
            } => {
                for p in [train_images, train_labels] {
                    if !p.exists() {
                        return Err(CsnError::Config(format!(
                            "dataset file not found: {}",
                            p.display()
                        )));
                    }
                }
                let train = load_idx(train_images, train_labels, *hierarchy)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        if !ti.exists() || !tl.exists() {
                            return Err(CsnError::Config(format!(
                                "dataset file not found: {} or {}",
                                ti.display(),
                                tl.display()
                            )));
                        }
                        let test = load_idx(ti, tl, *hierarchy)?;
                        Dataset::merge_train_test(train, test, *val_fraction, seed)
                    }
                    (None, None) => Ok(train),
                    _ => Err(CsnError::Config(
                        "test_images and test_labels must be given together".into(),
                    )),
                }
            }
            DatasetSpec::Weather { n } => gen_weather(*n, seed),
            DatasetSpec::FairHier { n, config } => gen_fair_hier(*n, seed, config),
        }
    }
}

/// Architecture without the input width, which comes from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub variational: bool,
    #[serde(default = "default_decoder_final")]
    pub decoder_final: Activation,
}

fn default_decoder_final() -> Activation {
    Activation::Sigmoid
}

impl ArchSpec {
    pub fn with_input(&self, input_dim: usize) -> ArchConfig {
        ArchConfig {
            input_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            variational: self.variational,
            decoder_final: self.decoder_final,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
    #[serde(default)]
    pub parallelism: Parallelism,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairEvalSpec {
    pub y_concept: usize,
    pub s_concept: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierEvalSpec {
    #[serde(default)]
    pub fine_concept: usize,
    #[serde(default = "default_coarse")]
    pub coarse_concept: usize,
}

fn default_coarse() -> usize {
    1
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default)]
    pub fair: Option<FairEvalSpec>,
    #[serde(default)]
    pub hier: Option<HierEvalSpec>,
    /// (source, target) concept pairs for the intervention ratio.
    #[serde(default)]
    pub rho_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub architecture: ArchSpec,
    pub concepts: Vec<ConceptConfig>,
    pub train: TrainSpec,
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CsnError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CsnError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CsnError::Config(format!("invalid config {}: {e}", path.display()))
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(CsnError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CsnError> {
        if self.concepts.is_empty() {
            return Err(CsnError::Config("at least one concept required".into()));
        }
        self.train_config().validate()?;
        let c = self.concepts.len();
        if self.loss_weights.classification.len() != c || self.loss_weights.kl.len() != c {
            return Err(CsnError::Config(format!(
                "loss weight vectors must have one entry per concept ({c})"
            )));
        }
        for spec in &self.loss_weights.alignment {
            if spec.a >= c || spec.b >= c {
                return Err(CsnError::Config(format!(
                    "alignment pair ({}, {}) references undeclared concepts",
                    spec.a, spec.b
                )));
            }
        }
        for (src, tgt) in &self.eval.rho_pairs {
            if *src >= c || *tgt >= c {
                return Err(CsnError::Config(format!(
                    "rho pair ({src}, {tgt}) references undeclared concepts"
                )));
            }
        }
        if let Some(f) = &self.eval.fair {
            if f.y_concept >= c || f.s_concept >= c {
                return Err(CsnError::Config("fair eval concepts out of range".into()));
            }
        }
        if let Some(h) = &self.eval.hier {
            if h.fine_concept >= c || h.coarse_concept >= c {
                return Err(CsnError::Config("hier eval concepts out of range".into()));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer.clone(),
            seed: self.seed,
            early_stopping: self.train.early_stopping.clone(),
            loss_weights: self.loss_weights.clone(),
            parallelism: self.train.parallelism,
        }
    }

    /// Output directory, honoring the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }
}
