//! The model: an encoder MLP (optionally variational), a decoder MLP, and
//! one trainable prototype set per classification task. Classification for
//! a task is softmax over negated squared distances from the encoding to
//! that task's prototypes, with same-class prototype probabilities summed.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CsnError, Result};
use crate::linalg::{softmax_neg, squared_distance, Mat};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// One fully-connected layer: y = act(W x + b).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Mat, // out × in
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weights.rows
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weights.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v = self.activation.apply(*v + b);
        }
        y
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        h
    }

    /// Forward pass keeping every layer input/output for backprop.
    /// `acts[0]` is the input, `acts[i+1]` the output of layer i.
    pub(crate) fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let y = layer.forward(acts.last().unwrap());
            acts.push(y);
        }
        acts
    }

    pub fn validate(&self, in_dim: usize, out_dim: usize, what: &'static str) -> Result<()> {
        let mut prev = in_dim;
        for layer in &self.layers {
            if layer.in_dim() != prev {
                return Err(CsnError::DimensionMismatch {
                    what,
                    expected: prev,
                    got: layer.in_dim(),
                });
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(CsnError::DimensionMismatch {
                    what,
                    expected: layer.out_dim(),
                    got: layer.bias.len(),
                });
            }
            if !layer.weights.is_finite() || !layer.bias.iter().all(|v| v.is_finite()) {
                return Err(CsnError::NonFinite(what.to_string()));
            }
            prev = layer.out_dim();
        }
        if prev != out_dim {
            return Err(CsnError::DimensionMismatch {
                what,
                expected: out_dim,
                got: prev,
            });
        }
        Ok(())
    }
}

/// Affine head without activation: y = W x + b.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineMap {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weights.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }
}

/// Encoder: shared trunk feeding a mean head and, when variational, a
/// log-variance head. Classification always uses the mean output; nothing
/// is ever sampled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub trunk: MlpParams,
    pub mean_head: AffineMap,
    pub logvar_head: Option<AffineMap>,
}

impl EncoderParams {
    pub fn is_variational(&self) -> bool {
        self.logvar_head.is_some()
    }
}

/// Trainable prototypes for one classification task, with the map from
/// prototype row to class index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub prototypes: Mat, // k × Z
    pub class_of: Vec<usize>,
    pub num_classes: usize,
}

impl PrototypeSet {
    pub fn num_prototypes(&self) -> usize {
        self.prototypes.rows
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.prototypes.cols != latent_dim {
            return Err(CsnError::DimensionMismatch {
                what: "prototype width",
                expected: latent_dim,
                got: self.prototypes.cols,
            });
        }
        if self.class_of.len() != self.prototypes.rows {
            return Err(CsnError::DimensionMismatch {
                what: "class_of length",
                expected: self.prototypes.rows,
                got: self.class_of.len(),
            });
        }
        if self.prototypes.rows < self.num_classes {
            return Err(CsnError::Config(format!(
                "{} prototypes cannot cover {} classes",
                self.prototypes.rows, self.num_classes
            )));
        }
        let mut covered = vec![false; self.num_classes];
        for &c in &self.class_of {
            if c >= self.num_classes {
                return Err(CsnError::LabelOutOfRange {
                    label: c,
                    classes: self.num_classes,
                });
            }
            covered[c] = true;
        }
        if covered.iter().any(|c| !c) {
            return Err(CsnError::Config(
                "every class must own at least one prototype".into(),
            ));
        }
        if !self.prototypes.is_finite() {
            return Err(CsnError::NonFinite("prototypes".into()));
        }
        Ok(())
    }

    /// Sums a per-prototype probability vector into per-class mass.
    pub fn class_mass(&self, proto_probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for (j, &p) in proto_probs.iter().enumerate() {
            out[self.class_of[j]] += p;
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsnModel {
    pub encoder: EncoderParams,
    pub decoder: MlpParams,
    pub concepts: Vec<PrototypeSet>,
    pub input_dim: usize,
    pub latent_dim: usize,
}

impl CsnModel {
    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder
            .trunk
            .validate(self.input_dim, self.encoder.trunk.out_dim(), "encoder trunk")?;
        let h = self.encoder.trunk.out_dim();
        if self.encoder.mean_head.weights.cols != h
            || self.encoder.mean_head.weights.rows != self.latent_dim
        {
            return Err(CsnError::DimensionMismatch {
                what: "mean head",
                expected: self.latent_dim,
                got: self.encoder.mean_head.weights.rows,
            });
        }
        if let Some(lv) = &self.encoder.logvar_head {
            if lv.weights.cols != h || lv.weights.rows != self.latent_dim {
                return Err(CsnError::DimensionMismatch {
                    what: "logvar head",
                    expected: self.latent_dim,
                    got: lv.weights.rows,
                });
            }
        }
        self.decoder
            .validate(self.latent_dim, self.input_dim, "decoder")?;
        for set in &self.concepts {
            set.validate(self.latent_dim)?;
        }
        Ok(())
    }

    /// Encodes an input; returns the latent mean and, for variational
    /// encoders, the log-variance vector.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        if x.len() != self.input_dim {
            return Err(CsnError::DimensionMismatch {
                what: "encode input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let h = self.encoder.trunk.forward(x);
        let mu = self.encoder.mean_head.forward(&h);
        if !mu.iter().all(|v| v.is_finite()) {
            return Err(CsnError::NonFinite("encoder output".into()));
        }
        let logvar = match &self.encoder.logvar_head {
            Some(head) => {
                let lv = head.forward(&h);
                if !lv.iter().all(|v| v.is_finite()) {
                    return Err(CsnError::NonFinite("logvar output".into()));
                }
                Some(lv)
            }
            None => None,
        };
        Ok((mu, logvar))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(CsnError::DimensionMismatch {
                what: "decode input",
                expected: self.latent_dim,
                got: z.len(),
            });
        }
        let x = self.decoder.forward(z);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CsnError::NonFinite("decoder output".into()));
        }
        Ok(x)
    }

    /// Squared distances from `z` to each prototype of a concept.
    pub fn distances(&self, z: &[f64], concept: usize) -> Result<Vec<f64>> {
        let set = self
            .concepts
            .get(concept)
            .ok_or(CsnError::InvalidConcept {
                index: concept,
                count: self.concepts.len(),
            })?;
        if z.len() != self.latent_dim {
            return Err(CsnError::DimensionMismatch {
                what: "distance input",
                expected: self.latent_dim,
                got: z.len(),
            });
        }
        Ok((0..set.num_prototypes())
            .map(|j| squared_distance(z, set.prototypes.row(j)))
            .collect())
    }

    /// Class distribution of one concept at latent point `z`: softmax of
    /// negated squared prototype distances, summed per class.
    pub fn concept_distribution(&self, z: &[f64], concept: usize) -> Result<Vec<f64>> {
        let d = self.distances(z, concept)?;
        let probs = softmax_neg(&d);
        Ok(self.concepts[concept].class_mass(&probs))
    }

    /// Predicted class per concept; argmax ties break toward the lowest
    /// class index.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        let (mu, _) = self.encode(x)?;
        self.predict_latent(&mu)
    }

    pub fn predict_latent(&self, z: &[f64]) -> Result<Vec<usize>> {
        (0..self.concepts.len())
            .map(|i| {
                let dist = self.concept_distribution(z, i)?;
                Ok(argmax_lowest(&dist))
            })
            .collect()
    }

    /// Mutable slices over every trainable parameter, in a fixed order
    /// (encoder trunk, mean head, logvar head, decoder, prototypes).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.encoder.trunk.layers {
            out.push(&mut layer.weights.data);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.encoder.mean_head.weights.data);
        out.push(&mut self.encoder.mean_head.bias);
        if let Some(lv) = &mut self.encoder.logvar_head {
            out.push(&mut lv.weights.data);
            out.push(&mut lv.bias);
        }
        for layer in &mut self.decoder.layers {
            out.push(&mut layer.weights.data);
            out.push(&mut layer.bias);
        }
        for set in &mut self.concepts {
            out.push(&mut set.prototypes.data);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for layer in &self.encoder.trunk.layers {
            n += layer.weights.data.len() + layer.bias.len();
        }
        n += self.encoder.mean_head.weights.data.len() + self.encoder.mean_head.bias.len();
        if let Some(lv) = &self.encoder.logvar_head {
            n += lv.weights.data.len() + lv.bias.len();
        }
        for layer in &self.decoder.layers {
            n += layer.weights.data.len() + layer.bias.len();
        }
        for set in &self.concepts {
            n += set.prototypes.data.len();
        }
        n
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let doc = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.clone(),
        };
        serde_json::to_writer(BufWriter::new(file), &doc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CsnModel> {
        let file = File::open(path)?;
        let doc: CheckpointFile = serde_json::from_reader(BufReader::new(file))?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CsnError::FormatVersion(doc.format_version));
        }
        doc.model.validate()?;
        Ok(doc.model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    model: CsnModel,
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gradient of `-ln(class mass of `label`)` with respect to the distance
/// vector `dists`, where class mass comes from softmax(-dists) summed per
/// class. Shared by the training loss and the latent-intervention metric.
pub(crate) fn cross_entropy_distance_grad(
    dists: &[f64],
    class_of: &[usize],
    num_classes: usize,
    label: usize,
    grad: &mut [f64],
    scale: f64,
) -> f64 {
    let s = softmax_neg(dists);
    let mut mass = vec![0.0; num_classes];
    for (j, &p) in s.iter().enumerate() {
        mass[class_of[j]] += p;
    }
    let g_y = mass[label].max(f64::MIN_POSITIVE);
    for (j, &p) in s.iter().enumerate() {
        let indicator = if class_of[j] == label { 1.0 } else { 0.0 };
        grad[j] += scale * p * (indicator / g_y - 1.0);
    }
    -g_y.ln()
}
