//! Initialization, optimizers, and the mini-batch training loop.
//!
//! Everything is seeded: initialization draws from a ChaCha stream keyed on
//! the seed, and each epoch's shuffle is a pure function of (seed, epoch).
//! Training a model twice with the same configuration therefore produces
//! bit-identical parameters on one platform, in either execution mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Split};
use crate::error::{CsnError, Result};
use crate::linalg::Mat;
use crate::losses::{gradient, total_loss, CsnGrads, LossBreakdown, LossWeights};
use crate::model::{Activation, AffineMap, CsnModel, EncoderParams, Layer, MlpParams, PrototypeSet};
use crate::parallel::Parallelism;

/// Standard deviation of the prototype initializer.
pub const PROTO_INIT_STD: f64 = 0.1;

/// Network shape. The decoder defaults to a mirror of the hidden stack with
/// a sigmoid output layer; set `decoder_final` to `Identity` for targets
/// that are not in [0, 1] (z-scored tabular features, for example).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub variational: bool,
    #[serde(default = "default_decoder_final")]
    pub decoder_final: Activation,
}

fn default_decoder_final() -> Activation {
    Activation::Sigmoid
}

/// One classification task: `classes × prototypes_per_class` prototypes,
/// classes assigned round-robin (prototype j belongs to class j mod Y).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptConfig {
    pub classes: usize,
    #[serde(default = "default_ppc")]
    pub prototypes_per_class: usize,
}

fn default_ppc() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    ValLoss,
    ValAccuracy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub metric: EarlyStopMetric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub parallelism: Parallelism,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(CsnError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(CsnError::Config("batch_size must be >= 1".into()));
        }
        if self.optimizer.lr() < 0.0 || !self.optimizer.lr().is_finite() {
            return Err(CsnError::Config("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter moment accumulators and step counter.
pub struct OptimizerState {
    config: OptimizerConfig,
    m: CsnGrads,
    v: Option<CsnGrads>, // Adam second moments
    step: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &CsnModel) -> Self {
        let v = matches!(config, OptimizerConfig::Adam { .. })
            .then(|| CsnGrads::zeros_like(model));
        OptimizerState {
            config,
            m: CsnGrads::zeros_like(model),
            v,
            step: 0,
        }
    }

    pub fn apply(&mut self, model: &mut CsnModel, grads: &CsnGrads) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                let mut params = model.param_slices_mut();
                let mut mom = self.m.param_slices_mut();
                let g = grads.param_slices();
                for s in 0..params.len() {
                    for i in 0..params[s].len() {
                        let buf = momentum * mom[s][i] + g[s][i];
                        mom[s][i] = buf;
                        params[s][i] -= lr * buf;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let mut params = model.param_slices_mut();
                let mut m = self.m.param_slices_mut();
                let v = self.v.as_mut().expect("adam moments");
                let mut v = v.param_slices_mut();
                let g = grads.param_slices();
                for s in 0..params.len() {
                    for i in 0..params[s].len() {
                        let gi = g[s][i];
                        m[s][i] = beta1 * m[s][i] + (1.0 - beta1) * gi;
                        v[s][i] = beta2 * v[s][i] + (1.0 - beta2) * gi * gi;
                        let mh = m[s][i] / bc1;
                        let vh = v[s][i] / bc2;
                        params[s][i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Builds a model with Glorot-uniform MLP weights and prototypes drawn from
/// N(0, 0.1²), reproducibly from the seed.
pub fn init_model(arch: &ArchConfig, concepts: &[ConceptConfig], seed: u64) -> Result<CsnModel> {
    if arch.input_dim == 0 || arch.latent_dim == 0 {
        return Err(CsnError::Config("zero input or latent dimension".into()));
    }
    if concepts.is_empty() {
        return Err(CsnError::Config("at least one concept is required".into()));
    }
    for c in concepts {
        if c.classes < 2 {
            return Err(CsnError::Config("each concept needs >= 2 classes".into()));
        }
        if c.prototypes_per_class < 1 {
            return Err(CsnError::Config("prototypes_per_class must be >= 1".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let glorot = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut w = Mat::zeros(rows, cols);
        for v in &mut w.data {
            *v = rng.random_range(-limit..limit);
        }
        w
    };

    let mut dims = vec![arch.input_dim];
    dims.extend_from_slice(&arch.hidden);
    let mut trunk_layers = Vec::new();
    for wnd in dims.windows(2) {
        trunk_layers.push(Layer {
            weights: glorot(wnd[1], wnd[0], &mut rng),
            bias: vec![0.0; wnd[1]],
            activation: Activation::Relu,
        });
    }
    let hdim = *dims.last().unwrap();
    let mean_head = AffineMap {
        weights: glorot(arch.latent_dim, hdim, &mut rng),
        bias: vec![0.0; arch.latent_dim],
    };
    let logvar_head = arch.variational.then(|| AffineMap {
        weights: glorot(arch.latent_dim, hdim, &mut rng),
        bias: vec![0.0; arch.latent_dim],
    });

    // Decoder mirrors the hidden stack.
    let mut dec_dims = vec![arch.latent_dim];
    dec_dims.extend(arch.hidden.iter().rev());
    dec_dims.push(arch.input_dim);
    let mut dec_layers = Vec::new();
    for (li, wnd) in dec_dims.windows(2).enumerate() {
        let act = if li + 2 == dec_dims.len() {
            arch.decoder_final
        } else {
            Activation::Relu
        };
        dec_layers.push(Layer {
            weights: glorot(wnd[1], wnd[0], &mut rng),
            bias: vec![0.0; wnd[1]],
            activation: act,
        });
    }

    let normal = Normal::new(0.0, PROTO_INIT_STD).expect("valid normal");
    let concepts = concepts
        .iter()
        .map(|c| {
            let k = c.classes * c.prototypes_per_class;
            let mut p = Mat::zeros(k, arch.latent_dim);
            for v in &mut p.data {
                *v = normal.sample(&mut rng);
            }
            PrototypeSet {
                prototypes: p,
                class_of: (0..k).map(|j| j % c.classes).collect(),
                num_classes: c.classes,
            }
        })
        .collect();

    let model = CsnModel {
        encoder: EncoderParams {
            trunk: MlpParams { layers: trunk_layers },
            mean_head,
            logvar_head,
        },
        decoder: MlpParams { layers: dec_layers },
        concepts,
        input_dim: arch.input_dim,
        latent_dim: arch.latent_dim,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_metric: Option<f64>,
}

pub struct FitResult {
    pub model: CsnModel,
    pub history: Vec<EpochRecord>,
    /// Epoch at which a non-finite loss aborted training, if any. The model
    /// retained is the last finite snapshot.
    pub diverged_at: Option<usize>,
}

/// Called whenever the early-stopping metric improves; receives the current
/// model, epoch index, and metric value.
pub type ImprovementHook<'a> = &'a mut dyn FnMut(&CsnModel, usize, f64);

/// Trains the model on the dataset's train split, evaluating the
/// early-stopping metric on the validation split after each epoch.
/// Encoder, decoder, and prototypes all move in every step.
pub fn fit(
    mut model: CsnModel,
    data: &Dataset,
    config: &TrainConfig,
    mut on_improve: Option<ImprovementHook<'_>>,
) -> Result<FitResult> {
    config.validate()?;
    config.loss_weights.validate(&model)?;
    data.check_labels_for(&model)?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(CsnError::EmptyInput("train split"));
    }
    let val_idx = data.indices(Split::Val);
    let mode = config.parallelism;

    let mut opt = OptimizerState::new(config.optimizer.clone(), &model);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_metric: Option<f64> = None;
    let mut epochs_since_improve = 0usize;
    let mut snapshot = model.clone();

    for epoch in 0..config.epochs {
        // Deterministic per-epoch shuffle: pure function of (seed, epoch).
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        shuffle(&mut order, &mut rng);

        let mut sum = SumBreakdown::default();
        let mut samples_seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| data.x.row(i)).collect();
            let labels: Vec<Vec<usize>> = data
                .labels
                .iter()
                .map(|task| chunk.iter().map(|&i| task[i]).collect())
                .collect();
            match gradient(&model, &config.loss_weights, &xs, &labels, mode) {
                Ok((breakdown, grads)) => {
                    sum.add(&breakdown, chunk.len());
                    samples_seen += chunk.len();
                    opt.apply(&mut model, &grads);
                }
                Err(CsnError::NonFinite(term)) => {
                    return Ok(FitResult {
                        model: snapshot,
                        history,
                        diverged_at: Some(epoch),
                    })
                    .map(|mut r| {
                        r.history.push(EpochRecord {
                            epoch,
                            loss: sum.mean(samples_seen.max(1)),
                            val_metric: None,
                        });
                        let _ = term;
                        r
                    });
                }
                Err(e) => return Err(e),
            }
        }

        let epoch_loss = sum.mean(samples_seen);
        if !epoch_loss.total.is_finite() {
            return Ok(FitResult {
                model: snapshot,
                history,
                diverged_at: Some(epoch),
            });
        }
        snapshot = model.clone();

        let val_metric = if val_idx.is_empty() {
            None
        } else {
            Some(match config.early_stopping.as_ref().map(|e| e.metric) {
                Some(EarlyStopMetric::ValAccuracy) => {
                    validation_accuracy(&model, data, &val_idx)?
                }
                _ => {
                    let xs: Vec<&[f64]> = val_idx.iter().map(|&i| data.x.row(i)).collect();
                    let labels: Vec<Vec<usize>> = data
                        .labels
                        .iter()
                        .map(|task| val_idx.iter().map(|&i| task[i]).collect())
                        .collect();
                    total_loss(&model, &config.loss_weights, &xs, &labels, mode)?.total
                }
            })
        };

        history.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            val_metric,
        });

        if let (Some(es), Some(metric)) = (&config.early_stopping, val_metric) {
            let improved = match (es.metric, best_metric) {
                (_, None) => true,
                (EarlyStopMetric::ValLoss, Some(best)) => metric < best,
                (EarlyStopMetric::ValAccuracy, Some(best)) => metric > best,
            };
            if improved {
                best_metric = Some(metric);
                epochs_since_improve = 0;
                if let Some(hook) = on_improve.as_mut() {
                    hook(&model, epoch, metric);
                }
            } else {
                epochs_since_improve += 1;
                if epochs_since_improve >= es.patience {
                    break;
                }
            }
        }
    }

    Ok(FitResult {
        model,
        history,
        diverged_at: None,
    })
}

/// Mean per-concept prediction accuracy over the given rows.
fn validation_accuracy(model: &CsnModel, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for &i in idx {
        let pred = model.predict(data.x.row(i))?;
        for (task, &p) in pred.iter().enumerate() {
            if data.labels[task][i] == p {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Fisher-Yates with the crate's pinned RNG; avoids depending on the rand
/// crate's shuffle implementation staying stable across versions.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Epoch shuffle order exposed for reproducibility tests.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    shuffle(&mut order, &mut rng);
    order
}

#[derive(Default)]
struct SumBreakdown {
    recon: f64,
    pcn: Vec<f64>,
    kl: Vec<f64>,
    alignment: Vec<f64>,
    total: f64,
}

impl SumBreakdown {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        if self.pcn.is_empty() {
            self.pcn = vec![0.0; b.pcn.len()];
            self.kl = vec![0.0; b.kl.len()];
            self.alignment = vec![0.0; b.alignment.len()];
        }
        self.recon += b.recon * w;
        self.total += b.total * w;
        for (acc, v) in self.pcn.iter_mut().zip(&b.pcn) {
            *acc += v * w;
        }
        for (acc, v) in self.kl.iter_mut().zip(&b.kl) {
            *acc += v * w;
        }
        for (acc, v) in self.alignment.iter_mut().zip(&b.alignment) {
            *acc += v * w;
        }
    }

    fn mean(&self, n: usize) -> LossBreakdown {
        let w = n.max(1) as f64;
        LossBreakdown {
            recon: self.recon / w,
            pcn: self.pcn.iter().map(|v| v / w).collect(),
            kl: self.kl.iter().map(|v| v / w).collect(),
            alignment: self.alignment.iter().map(|v| v / w).collect(),
            total: self.total / w,
        }
    }
}
