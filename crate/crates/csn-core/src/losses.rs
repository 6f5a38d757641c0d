//! Training loss terms and exact gradients.
//!
//! The total loss is a weighted sum of four kinds of terms:
//!
//! 1. reconstruction: mean squared reconstruction error over the batch;
//! 2. per-concept classification: cross-entropy of the concept distribution
//!    over *projected* encodings plus two clustering terms pulling
//!    prototypes and projected encodings toward each other;
//! 3. per-concept KL: closed-form Gaussian divergence of the encoding
//!    distribution restricted to the subspace's orthogonal complement
//!    against a unit Gaussian, softmax-weighted per prototype;
//! 4. pairwise subspace alignment, either `weight · a` or
//!    `weight · (a − intercept)²`.
//!
//! [`gradient`] differentiates the whole assembly analytically, including
//! the flow through Gram-Schmidt orthonormalization and projections, so a
//! single optimizer step can move encoder, decoder, and every prototype.
//! Batch work is chunked deterministically (see [`crate::parallel`]): the
//! result is bit-identical across thread counts and execution modes.

use serde::{Deserialize, Serialize};

use crate::error::{CsnError, Result};
use crate::geometry::{build_subspace_tape, ConceptSubspace, SubspaceTape};
use crate::linalg::{
    axpy, chol_inverse, chol_lndet, cholesky, dot, softmax_neg, squared_distance, sub, Mat,
};
use crate::model::{cross_entropy_distance_grad, CsnModel, MlpParams};
use crate::parallel::{map_chunks, Parallelism};

pub const DEFAULT_PCN_W1: f64 = 0.05;
pub const DEFAULT_PCN_W2: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentForm {
    Linear,
    Squared,
}

/// One penalized subspace pair. `weight` may be negative (rewarding
/// alignment, i.e. pushing toward parallel subspaces).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentSpec {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
    #[serde(default)]
    pub intercept: f64,
    pub form: AlignmentForm,
}

/// All loss weights. `classification` and `kl` have one entry per concept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub classification: Vec<f64>,
    pub kl: Vec<f64>,
    #[serde(default)]
    pub alignment: Vec<AlignmentSpec>,
    #[serde(default = "default_pcn_w1")]
    pub pcn_w1: f64,
    #[serde(default = "default_pcn_w2")]
    pub pcn_w2: f64,
}

fn default_pcn_w1() -> f64 {
    DEFAULT_PCN_W1
}

fn default_pcn_w2() -> f64 {
    DEFAULT_PCN_W2
}

impl LossWeights {
    /// All-zero weights for `concepts` tasks.
    pub fn zeros(concepts: usize) -> Self {
        LossWeights {
            recon: 0.0,
            classification: vec![0.0; concepts],
            kl: vec![0.0; concepts],
            alignment: Vec::new(),
            pcn_w1: DEFAULT_PCN_W1,
            pcn_w2: DEFAULT_PCN_W2,
        }
    }

    pub fn validate(&self, model: &CsnModel) -> Result<()> {
        let c = model.num_concepts();
        if self.classification.len() != c {
            return Err(CsnError::DimensionMismatch {
                what: "classification weights",
                expected: c,
                got: self.classification.len(),
            });
        }
        if self.kl.len() != c {
            return Err(CsnError::DimensionMismatch {
                what: "kl weights",
                expected: c,
                got: self.kl.len(),
            });
        }
        let finite = self.recon.is_finite()
            && self.pcn_w1.is_finite()
            && self.pcn_w2.is_finite()
            && self.classification.iter().all(|w| w.is_finite())
            && self.kl.iter().all(|w| w.is_finite());
        if !finite {
            return Err(CsnError::NonFinite("loss weights".into()));
        }
        if !model.encoder.is_variational() && self.kl.iter().any(|&w| w != 0.0) {
            return Err(CsnError::KlWithoutVariationalEncoder);
        }
        let mut seen = std::collections::BTreeSet::new();
        for spec in &self.alignment {
            if spec.a >= c || spec.b >= c {
                return Err(CsnError::InvalidConcept {
                    index: spec.a.max(spec.b),
                    count: c,
                });
            }
            if spec.a >= spec.b {
                return Err(CsnError::Config(format!(
                    "alignment pair ({}, {}) must satisfy a < b",
                    spec.a, spec.b
                )));
            }
            if !seen.insert((spec.a, spec.b)) {
                return Err(CsnError::Config(format!(
                    "duplicate alignment pair ({}, {})",
                    spec.a, spec.b
                )));
            }
            if !spec.weight.is_finite() || !spec.intercept.is_finite() {
                return Err(CsnError::NonFinite("alignment weights".into()));
            }
            if !(0.0..=1.0).contains(&spec.intercept) {
                return Err(CsnError::Config(format!(
                    "alignment intercept {} outside [0, 1]",
                    spec.intercept
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation. Parts are stored *unweighted*;
/// `total` is the weight-scaled sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub pcn: Vec<f64>,
    pub kl: Vec<f64>,
    pub alignment: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

// ---------------------------------------------------------------------------
// Gradient containers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl AffineGrads {
    fn zeros(rows: usize, cols: usize) -> Self {
        AffineGrads {
            weights: Mat::zeros(rows, cols),
            bias: vec![0.0; rows],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.weights.add_assign(&other.weights);
        axpy(&mut self.bias, 1.0, &other.bias);
    }
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<AffineGrads>,
}

impl MlpGrads {
    fn zeros_like(mlp: &MlpParams) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| AffineGrads::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }
}

/// Gradients mirroring every trainable parameter of a [`CsnModel`].
#[derive(Debug, Clone)]
pub struct CsnGrads {
    pub trunk: MlpGrads,
    pub mean_head: AffineGrads,
    pub logvar_head: Option<AffineGrads>,
    pub decoder: MlpGrads,
    pub prototypes: Vec<Mat>,
}

impl CsnGrads {
    pub fn zeros_like(model: &CsnModel) -> Self {
        CsnGrads {
            trunk: MlpGrads::zeros_like(&model.encoder.trunk),
            mean_head: AffineGrads::zeros(
                model.encoder.mean_head.weights.rows,
                model.encoder.mean_head.weights.cols,
            ),
            logvar_head: model
                .encoder
                .logvar_head
                .as_ref()
                .map(|h| AffineGrads::zeros(h.weights.rows, h.weights.cols)),
            decoder: MlpGrads::zeros_like(&model.decoder),
            prototypes: model
                .concepts
                .iter()
                .map(|s| Mat::zeros(s.prototypes.rows, s.prototypes.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.trunk.add_assign(&other.trunk);
        self.mean_head.add_assign(&other.mean_head);
        if let (Some(a), Some(b)) = (self.logvar_head.as_mut(), other.logvar_head.as_ref()) {
            a.add_assign(b);
        }
        self.decoder.add_assign(&other.decoder);
        for (a, b) in self.prototypes.iter_mut().zip(&other.prototypes) {
            a.add_assign(b);
        }
    }

    /// Slices in the same order as [`CsnModel::param_slices_mut`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.trunk.layers {
            out.push(&layer.weights.data);
            out.push(&layer.bias);
        }
        out.push(&self.mean_head.weights.data);
        out.push(&self.mean_head.bias);
        if let Some(lv) = &self.logvar_head {
            out.push(&lv.weights.data);
            out.push(&lv.bias);
        }
        for layer in &self.decoder.layers {
            out.push(&layer.weights.data);
            out.push(&layer.bias);
        }
        for p in &self.prototypes {
            out.push(&p.data);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.trunk.layers {
            out.push(&mut layer.weights.data);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.mean_head.weights.data);
        out.push(&mut self.mean_head.bias);
        if let Some(lv) = &mut self.logvar_head {
            out.push(&mut lv.weights.data);
            out.push(&mut lv.bias);
        }
        for layer in &mut self.decoder.layers {
            out.push(&mut layer.weights.data);
            out.push(&mut layer.bias);
        }
        for p in &mut self.prototypes {
            out.push(&mut p.data);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

// ---------------------------------------------------------------------------
// Standalone term functions (direct route)
// ---------------------------------------------------------------------------

/// Mean over the batch of the squared reconstruction error.
pub fn reconstruction_loss(model: &CsnModel, xs: &[&[f64]]) -> Result<f64> {
    if xs.is_empty() {
        return Err(CsnError::EmptyInput("reconstruction batch"));
    }
    let mut total = 0.0;
    for x in xs {
        let (mu, _) = model.encode(x)?;
        let xhat = model.decode(&mu)?;
        total += squared_distance(&xhat, x);
    }
    Ok(total / xs.len() as f64)
}

/// Classification loss of one concept on *projected* encodings:
/// cross-entropy plus `w1`/`w2`-weighted bidirectional clustering terms
/// (min squared distance from each prototype to the batch and from each
/// projected encoding to the prototypes).
pub fn pcn_loss(
    model: &CsnModel,
    concept: usize,
    xs: &[&[f64]],
    labels: &[usize],
    w1: f64,
    w2: f64,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(CsnError::EmptyInput("classification batch"));
    }
    let set = model
        .concepts
        .get(concept)
        .ok_or(CsnError::InvalidConcept {
            index: concept,
            count: model.num_concepts(),
        })?;
    if labels.len() != xs.len() {
        return Err(CsnError::DimensionMismatch {
            what: "label count",
            expected: xs.len(),
            got: labels.len(),
        });
    }
    for &y in labels {
        if y >= set.num_classes {
            return Err(CsnError::LabelOutOfRange {
                label: y,
                classes: set.num_classes,
            });
        }
    }
    let subspace = crate::geometry::build_subspace(&set.prototypes)?;
    let k = set.num_prototypes();
    let mut ce_sum = 0.0;
    let mut dists = Vec::with_capacity(xs.len());
    for (x, &y) in xs.iter().zip(labels) {
        let (mu, _) = model.encode(x)?;
        let u = crate::geometry::project(&mu, &subspace)?;
        let d: Vec<f64> = (0..k)
            .map(|j| squared_distance(&u, set.prototypes.row(j)))
            .collect();
        let s = softmax_neg(&d);
        let mass = set.class_mass(&s);
        ce_sum += -mass[y].max(f64::MIN_POSITIVE).ln();
        dists.push(d);
    }
    let b = xs.len() as f64;
    let r1: f64 = (0..k)
        .map(|j| dists.iter().map(|d| d[j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / k as f64;
    let r2: f64 = dists
        .iter()
        .map(|d| d.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / b;
    Ok(ce_sum / b + w1 * r1 + w2 * r2)
}

/// KL regularizer of one concept: for each sample, the closed-form Gaussian
/// divergence of the encoder distribution restricted to the subspace's
/// orthogonal complement against a unit Gaussian, evaluated per prototype
/// and combined with softmax weights over full-space distances. Defined as
/// 0 for non-variational encoders.
pub fn kl_regularizer(model: &CsnModel, concept: usize, xs: &[&[f64]]) -> Result<f64> {
    if xs.is_empty() {
        return Err(CsnError::EmptyInput("kl batch"));
    }
    let set = model
        .concepts
        .get(concept)
        .ok_or(CsnError::InvalidConcept {
            index: concept,
            count: model.num_concepts(),
        })?;
    if !model.encoder.is_variational() {
        return Ok(0.0);
    }
    let subspace = crate::geometry::build_subspace(&set.prototypes)?;
    let proj = subspace.projection_matrix();
    let z = model.latent_dim;
    let rank = subspace.rank();
    let mut total = 0.0;
    for x in xs {
        let (mu, logvar) = model.encode(x)?;
        let logvar = logvar.expect("variational encoder");
        let sigma2: Vec<f64> = logvar.iter().map(|v| v.exp()).collect();
        let d_full: Vec<f64> = (0..set.num_prototypes())
            .map(|j| squared_distance(&mu, set.prototypes.row(j)))
            .collect();
        let s = softmax_neg(&d_full);
        let (trace, lndet) = complement_trace_lndet(&proj, &sigma2)?;
        let mut val = 0.0;
        for (j, &w) in s.iter().enumerate() {
            let diff = sub(&mu, set.prototypes.row(j));
            let pr = proj.matvec(&diff);
            let mut r = diff;
            axpy(&mut r, -1.0, &pr);
            let kj = 0.5 * (trace + dot(&r, &r) - (z - rank) as f64 - lndet);
            val += w * kj;
        }
        total += val;
    }
    Ok(total / xs.len() as f64)
}

/// tr(Σ_c) and ln det(Σ_c) of the diagonal covariance restricted to the
/// orthogonal complement of a subspace with projection matrix `proj`.
/// The determinant comes from M = (I−P) D (I−P) + P, which is block
/// diagonal across span/complement with identity on the span.
fn complement_trace_lndet(proj: &Mat, sigma2: &[f64]) -> Result<(f64, f64)> {
    let z = sigma2.len();
    let mut trace = 0.0;
    for d in 0..z {
        trace += sigma2[d] * (1.0 - proj.at(d, d));
    }
    let m = complement_gauge_matrix(proj, sigma2);
    let l = cholesky(&m).ok_or_else(|| CsnError::NonFinite("kl covariance".into()))?;
    Ok((trace, chol_lndet(&l)))
}

/// M = (I−P) D (I−P) + P.
fn complement_gauge_matrix(proj: &Mat, sigma2: &[f64]) -> Mat {
    let z = sigma2.len();
    let mut ip = Mat::identity(z);
    for i in 0..z {
        for j in 0..z {
            *ip.at_mut(i, j) -= proj.at(i, j);
        }
    }
    // (I−P) D: scale columns of (I−P) by σ².
    let mut ipd = ip.clone();
    for r in 0..z {
        for c in 0..z {
            *ipd.at_mut(r, c) *= sigma2[c];
        }
    }
    let mut m = ipd.matmul(&ip);
    for i in 0..z {
        for j in 0..z {
            *m.at_mut(i, j) += proj.at(i, j);
        }
    }
    m
}

/// Weighted sum of alignment penalties over the configured pairs.
pub fn alignment_loss(model: &CsnModel, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for spec in &weights.alignment {
        let sa = crate::geometry::build_subspace(&model.concepts[spec.a].prototypes)?;
        let sb = crate::geometry::build_subspace(&model.concepts[spec.b].prototypes)?;
        let a = crate::geometry::alignment(&sa, &sb)?;
        total += match spec.form {
            AlignmentForm::Linear => spec.weight * a,
            AlignmentForm::Squared => spec.weight * (a - spec.intercept) * (a - spec.intercept),
        };
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Fused engine: total loss and gradients
// ---------------------------------------------------------------------------

/// Evaluates every term of the loss on a batch. `labels[i]` is the label
/// vector of concept `i` over the batch.
pub fn total_loss(
    model: &CsnModel,
    weights: &LossWeights,
    xs: &[&[f64]],
    labels: &[Vec<usize>],
    mode: Parallelism,
) -> Result<LossBreakdown> {
    let (breakdown, _) = evaluate(model, weights, xs, labels, mode, false)?;
    Ok(breakdown)
}

/// Exact analytic gradient of the total loss with respect to all trainable
/// parameters, plus the loss breakdown the gradient belongs to.
pub fn gradient(
    model: &CsnModel,
    weights: &LossWeights,
    xs: &[&[f64]],
    labels: &[Vec<usize>],
    mode: Parallelism,
) -> Result<(LossBreakdown, CsnGrads)> {
    let (breakdown, grads) = evaluate(model, weights, xs, labels, mode, true)?;
    Ok((breakdown, grads.expect("gradients requested")))
}

struct ConceptCtx {
    subspace: ConceptSubspace,
    tape: SubspaceTape,
    proj: Mat,
    want_kl: bool,
}

struct KlFwd {
    value: f64,
    k_vals: Vec<f64>,
    s_full: Vec<f64>,
    residuals: Vec<Vec<f64>>,
    inv: Option<Mat>,
    sigma2: Vec<f64>,
}

struct ConceptFwd {
    coords: Vec<f64>,
    u: Vec<f64>,
    d_proj: Vec<f64>,
    ce: f64,
    kl: Option<KlFwd>,
}

struct SampleFwd {
    trunk_acts: Vec<Vec<f64>>,
    mu: Vec<f64>,
    dec_acts: Option<Vec<Vec<f64>>>,
    recon: f64,
    concepts: Vec<ConceptFwd>,
}

struct ChunkGrads {
    grads: CsnGrads,
    q_bars: Vec<Mat>,
    p_bars: Vec<Mat>,
}

fn evaluate(
    model: &CsnModel,
    weights: &LossWeights,
    xs: &[&[f64]],
    labels: &[Vec<usize>],
    mode: Parallelism,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<CsnGrads>)> {
    let batch = xs.len();
    if batch == 0 {
        return Err(CsnError::EmptyInput("loss batch"));
    }
    weights.validate(model)?;
    let c = model.num_concepts();
    if labels.len() != c {
        return Err(CsnError::DimensionMismatch {
            what: "label task count",
            expected: c,
            got: labels.len(),
        });
    }
    for (i, ys) in labels.iter().enumerate() {
        if ys.len() != batch {
            return Err(CsnError::DimensionMismatch {
                what: "label vector length",
                expected: batch,
                got: ys.len(),
            });
        }
        let classes = model.concepts[i].num_classes;
        for &y in ys {
            if y >= classes {
                return Err(CsnError::LabelOutOfRange { label: y, classes });
            }
        }
    }

    let variational = model.encoder.is_variational();
    let ctxs: Vec<ConceptCtx> = model
        .concepts
        .iter()
        .map(|set| {
            let (subspace, tape) = build_subspace_tape(&set.prototypes)?;
            let proj = subspace.projection_matrix();
            Ok(ConceptCtx {
                subspace,
                tape,
                proj,
                want_kl: variational,
            })
        })
        .collect::<Result<_>>()?;

    // Alignment terms: batch-independent.
    let mut align_parts = Vec::with_capacity(weights.alignment.len());
    let mut q_bars: Vec<Mat> = ctxs
        .iter()
        .map(|ctx| Mat::zeros(model.latent_dim, ctx.subspace.rank()))
        .collect();
    for spec in &weights.alignment {
        let (sa, sb) = (&ctxs[spec.a].subspace, &ctxs[spec.b].subspace);
        let a = crate::geometry::alignment(sa, sb)?;
        let part = match spec.form {
            AlignmentForm::Linear => a,
            AlignmentForm::Squared => (a - spec.intercept) * (a - spec.intercept),
        };
        align_parts.push(part);
        if want_grad && spec.weight != 0.0 {
            let factor = match spec.form {
                AlignmentForm::Linear => spec.weight,
                AlignmentForm::Squared => spec.weight * 2.0 * (a - spec.intercept),
            };
            let (m, n) = (sa.rank(), sb.rank());
            let cross = sa.basis.transpose().matmul(&sb.basis); // m×n
            let scale = factor * 2.0 / (m as f64 * n as f64);
            let mut ga = sb.basis.matmul(&cross.transpose()); // Z×m
            ga.scale(scale);
            q_bars[spec.a].add_assign(&ga);
            let mut gb = sa.basis.matmul(&cross); // Z×n
            gb.scale(scale);
            q_bars[spec.b].add_assign(&gb);
        }
    }

    // Phase A: forward pass per sample, cached.
    let need_recon = weights.recon != 0.0 || !want_grad;
    let fwd_chunks: Vec<Result<Vec<SampleFwd>>> = map_chunks(batch, mode, |range| {
        range
            .map(|b| forward_sample(model, &ctxs, xs[b], labels, b, need_recon, want_grad))
            .collect()
    });
    let mut fwds: Vec<SampleFwd> = Vec::with_capacity(batch);
    for chunk in fwd_chunks {
        fwds.extend(chunk?);
    }

    // Phase B: batch-level clustering terms and breakdown assembly.
    let bf = batch as f64;
    let recon = fwds.iter().map(|f| f.recon).sum::<f64>() / bf;
    let mut pcn = Vec::with_capacity(c);
    let mut kl = Vec::with_capacity(c);
    // Per concept: argmin sample for each prototype (r1) and argmin
    // prototype for each sample (r2).
    let mut r1_argmins: Vec<Vec<usize>> = Vec::with_capacity(c);
    let mut r2_argmins: Vec<Vec<usize>> = Vec::with_capacity(c);
    for i in 0..c {
        let k = model.concepts[i].num_prototypes();
        let mut r1_arg = vec![0usize; k];
        let mut r1_sum = 0.0;
        for j in 0..k {
            let mut best = 0;
            for b in 1..batch {
                if fwds[b].concepts[i].d_proj[j] < fwds[best].concepts[i].d_proj[j] {
                    best = b;
                }
            }
            r1_arg[j] = best;
            r1_sum += fwds[best].concepts[i].d_proj[j];
        }
        let mut r2_arg = vec![0usize; batch];
        let mut r2_sum = 0.0;
        for (b, fwd) in fwds.iter().enumerate() {
            let d = &fwd.concepts[i].d_proj;
            let mut best = 0;
            for j in 1..k {
                if d[j] < d[best] {
                    best = j;
                }
            }
            r2_arg[b] = best;
            r2_sum += d[best];
        }
        let ce = fwds.iter().map(|f| f.concepts[i].ce).sum::<f64>() / bf;
        pcn.push(ce + weights.pcn_w1 * r1_sum / k as f64 + weights.pcn_w2 * r2_sum / bf);
        kl.push(
            fwds.iter()
                .map(|f| f.concepts[i].kl.as_ref().map_or(0.0, |k| k.value))
                .sum::<f64>()
                / bf,
        );
        r1_argmins.push(r1_arg);
        r2_argmins.push(r2_arg);
    }

    let mut total = weights.recon * recon;
    for i in 0..c {
        total += weights.classification[i] * pcn[i] + weights.kl[i] * kl[i];
    }
    for (spec, part) in weights.alignment.iter().zip(&align_parts) {
        total += spec.weight * part;
    }
    let breakdown = LossBreakdown {
        recon,
        pcn,
        kl,
        alignment: align_parts,
        total,
    };
    check_finite_terms(&breakdown)?;

    if !want_grad {
        return Ok((breakdown, None));
    }

    // Phase C: backward pass per chunk, deterministic combine.
    let chunk_grads: Vec<ChunkGrads> = map_chunks(batch, mode, |range| {
        let mut cg = ChunkGrads {
            grads: CsnGrads::zeros_like(model),
            q_bars: ctxs
                .iter()
                .map(|ctx| Mat::zeros(model.latent_dim, ctx.subspace.rank()))
                .collect(),
            p_bars: ctxs
                .iter()
                .map(|_| Mat::zeros(model.latent_dim, model.latent_dim))
                .collect(),
        };
        for b in range {
            backward_sample(
                model,
                weights,
                &ctxs,
                xs[b],
                labels,
                b,
                &fwds[b],
                bf,
                &r1_argmins,
                &r2_argmins,
                &mut cg,
            );
        }
        cg
    });

    let mut grads = CsnGrads::zeros_like(model);
    let mut p_bars: Vec<Mat> = ctxs
        .iter()
        .map(|_| Mat::zeros(model.latent_dim, model.latent_dim))
        .collect();
    for cg in chunk_grads {
        grads.add_assign(&cg.grads);
        for (acc, q) in q_bars.iter_mut().zip(&cg.q_bars) {
            acc.add_assign(q);
        }
        for (acc, p) in p_bars.iter_mut().zip(&cg.p_bars) {
            acc.add_assign(p);
        }
    }

    // Fold P-gradients into Q-gradients (P = QQᵀ), then run the
    // Gram-Schmidt tapes down to the prototypes.
    for i in 0..c {
        let ctx = &ctxs[i];
        if ctx.subspace.rank() > 0 {
            let pb = &p_bars[i];
            let mut sym = pb.clone();
            let pbt = pb.transpose();
            sym.add_assign(&pbt);
            let extra = sym.matmul(&ctx.subspace.basis); // Z×r
            q_bars[i].add_assign(&extra);
        }
        ctx.tape
            .backward(&ctx.subspace, &q_bars[i], &mut grads.prototypes[i]);
    }

    if !grads.is_finite() {
        return Err(CsnError::NonFinite("gradient".into()));
    }
    Ok((breakdown, Some(grads)))
}

fn check_finite_terms(b: &LossBreakdown) -> Result<()> {
    if !b.recon.is_finite() {
        return Err(CsnError::NonFinite("reconstruction loss".into()));
    }
    for (i, v) in b.pcn.iter().enumerate() {
        if !v.is_finite() {
            return Err(CsnError::NonFinite(format!("classification loss {i}")));
        }
    }
    for (i, v) in b.kl.iter().enumerate() {
        if !v.is_finite() {
            return Err(CsnError::NonFinite(format!("kl loss {i}")));
        }
    }
    for (i, v) in b.alignment.iter().enumerate() {
        if !v.is_finite() {
            return Err(CsnError::NonFinite(format!("alignment term {i}")));
        }
    }
    Ok(())
}

fn forward_sample(
    model: &CsnModel,
    ctxs: &[ConceptCtx],
    x: &[f64],
    labels: &[Vec<usize>],
    b: usize,
    need_recon: bool,
    want_grad: bool,
) -> Result<SampleFwd> {
    if x.len() != model.input_dim {
        return Err(CsnError::DimensionMismatch {
            what: "batch input",
            expected: model.input_dim,
            got: x.len(),
        });
    }
    let trunk_acts = model.encoder.trunk.forward_cached(x);
    let h = trunk_acts.last().unwrap();
    let mu = model.encoder.mean_head.forward(h);
    if !mu.iter().all(|v| v.is_finite()) {
        return Err(CsnError::NonFinite("encoder output".into()));
    }
    let logvar = model.encoder.logvar_head.as_ref().map(|lv| lv.forward(h));

    let (dec_acts, recon) = if need_recon {
        let acts = model.decoder.forward_cached(&mu);
        let r = squared_distance(acts.last().unwrap(), x);
        (Some(acts), r)
    } else {
        (None, 0.0)
    };

    let mut concepts = Vec::with_capacity(ctxs.len());
    for (i, ctx) in ctxs.iter().enumerate() {
        let set = &model.concepts[i];
        let k = set.num_prototypes();
        let coords = ctx.subspace.coordinates(&mu);
        let mut u = ctx.subspace.origin.clone();
        for cix in 0..ctx.subspace.basis.cols {
            let yc = coords[cix];
            for r in 0..u.len() {
                u[r] += yc * ctx.subspace.basis.at(r, cix);
            }
        }
        let d_proj: Vec<f64> = (0..k)
            .map(|j| squared_distance(&u, set.prototypes.row(j)))
            .collect();
        let s_proj = softmax_neg(&d_proj);
        let mass = set.class_mass(&s_proj);
        let ce = -(mass[labels[i][b]].max(f64::MIN_POSITIVE)).ln();

        let kl = if ctx.want_kl {
            let logvar = logvar.as_ref().expect("variational encoder");
            let sigma2: Vec<f64> = logvar.iter().map(|v| v.exp()).collect();
            let d_full: Vec<f64> = (0..k)
                .map(|j| squared_distance(&mu, set.prototypes.row(j)))
                .collect();
            let s_full = softmax_neg(&d_full);
            let z = model.latent_dim;
            let rank = ctx.subspace.rank();
            let mut trace = 0.0;
            for d in 0..z {
                trace += sigma2[d] * (1.0 - ctx.proj.at(d, d));
            }
            let m = complement_gauge_matrix(&ctx.proj, &sigma2);
            let l = cholesky(&m).ok_or_else(|| CsnError::NonFinite(format!("kl loss {i}")))?;
            let lndet = chol_lndet(&l);
            let inv = want_grad.then(|| chol_inverse(&l));
            let mut residuals = Vec::with_capacity(k);
            let mut k_vals = Vec::with_capacity(k);
            let mut value = 0.0;
            for j in 0..k {
                let diff = sub(&mu, set.prototypes.row(j));
                let pr = ctx.proj.matvec(&diff);
                let mut r = diff;
                axpy(&mut r, -1.0, &pr);
                let kj = 0.5 * (trace + dot(&r, &r) - (z - rank) as f64 - lndet);
                value += s_full[j] * kj;
                residuals.push(r);
                k_vals.push(kj);
            }
            Some(KlFwd {
                value,
                k_vals,
                s_full,
                residuals,
                inv,
                sigma2,
            })
        } else {
            None
        };

        concepts.push(ConceptFwd {
            coords,
            u,
            d_proj,
            ce,
            kl,
        });
    }

    Ok(SampleFwd {
        trunk_acts,
        mu,
        dec_acts,
        recon,
        concepts,
    })
}

#[allow(clippy::too_many_arguments)]
fn backward_sample(
    model: &CsnModel,
    weights: &LossWeights,
    ctxs: &[ConceptCtx],
    x: &[f64],
    labels: &[Vec<usize>],
    b: usize,
    fwd: &SampleFwd,
    batch_size: f64,
    r1_argmins: &[Vec<usize>],
    r2_argmins: &[Vec<usize>],
    cg: &mut ChunkGrads,
) {
    let z = model.latent_dim;
    let mut mu_bar = vec![0.0; z];
    let mut logvar_bar = vec![0.0; z];

    // Reconstruction path.
    if weights.recon != 0.0 {
        let dec_acts = fwd.dec_acts.as_ref().expect("decoder cache");
        let xhat = dec_acts.last().unwrap();
        let scale = weights.recon * 2.0 / batch_size;
        let out_grad: Vec<f64> = xhat.iter().zip(x).map(|(o, t)| scale * (o - t)).collect();
        let zg = mlp_backward(&model.decoder, dec_acts, &out_grad, &mut cg.grads.decoder);
        axpy(&mut mu_bar, 1.0, &zg);
    }

    for (i, ctx) in ctxs.iter().enumerate() {
        let set = &model.concepts[i];
        let k = set.num_prototypes();
        let cf = &fwd.concepts[i];
        let lam_p = weights.classification[i];

        // Classification + clustering through projected distances.
        if lam_p != 0.0 {
            let mut gamma = vec![0.0; k];
            cross_entropy_distance_grad(
                &cf.d_proj,
                &set.class_of,
                set.num_classes,
                labels[i][b],
                &mut gamma,
                1.0 / batch_size,
            );
            for (j, &bstar) in r1_argmins[i].iter().enumerate() {
                if bstar == b {
                    gamma[j] += weights.pcn_w1 / k as f64;
                }
            }
            gamma[r2_argmins[i][b]] += weights.pcn_w2 / batch_size;

            let mut u_bar = vec![0.0; z];
            for j in 0..k {
                let g = lam_p * gamma[j] * 2.0;
                if g == 0.0 {
                    continue;
                }
                let p = set.prototypes.row(j);
                let prow = cg.grads.prototypes[i].row_mut(j);
                for r in 0..z {
                    let diff = cf.u[r] - p[r];
                    u_bar[r] += g * diff;
                    prow[r] -= g * diff;
                }
            }

            // u = origin + Q y with y = Qᵀ(mu − origin).
            let pu = ctx.proj.matvec(&u_bar);
            axpy(&mut mu_bar, 1.0, &pu);
            {
                let orow = cg.grads.prototypes[i].row_mut(0);
                for r in 0..z {
                    orow[r] += u_bar[r] - pu[r];
                }
            }
            if ctx.subspace.rank() > 0 {
                let d = sub(&fwd.mu, &ctx.subspace.origin);
                let qtu = ctx.subspace.basis.matvec_t(&u_bar); // Qᵀ ū
                cg.q_bars[i].add_outer(1.0, &u_bar, &cf.coords);
                cg.q_bars[i].add_outer(1.0, &d, &qtu);
            }
        }

        // KL path.
        let lam_kl = weights.kl[i];
        if lam_kl != 0.0 {
            let klf = cf.kl.as_ref().expect("kl cache");
            let cb = lam_kl / batch_size;

            // Through the softmax over full-space distances.
            for j in 0..k {
                let coef = cb * klf.s_full[j] * (klf.value - klf.k_vals[j]);
                if coef == 0.0 {
                    continue;
                }
                let p = set.prototypes.row(j);
                let prow = cg.grads.prototypes[i].row_mut(j);
                for r in 0..z {
                    let diff = 2.0 * (fwd.mu[r] - p[r]);
                    mu_bar[r] += coef * diff;
                    prow[r] -= coef * diff;
                }
            }

            // Through the per-prototype residual means (½‖r_j‖² with
            // r_j = (I−P)(mu − p_j)).
            for j in 0..k {
                let w = cb * klf.s_full[j];
                let r = &klf.residuals[j];
                let prow = cg.grads.prototypes[i].row_mut(j);
                for d in 0..z {
                    mu_bar[d] += w * r[d];
                    prow[d] -= w * r[d];
                }
                let diff = sub(&fwd.mu, set.prototypes.row(j));
                cg.p_bars[i].add_outer(-w, r, &diff);
            }

            // Shared trace and log-det pieces (softmax weights sum to 1, so
            // they enter with total coefficient cb).
            let inv = klf.inv.as_ref().expect("kl inverse cache");
            let mut ip = Mat::identity(z);
            for a in 0..z {
                for bb in 0..z {
                    *ip.at_mut(a, bb) -= ctx.proj.at(a, bb);
                }
            }
            let t1 = ip.matmul(inv); // (I−P) G
            let ipg_ip = t1.matmul(&ip); // (I−P) G (I−P)
            for d in 0..z {
                let dtr = 0.5 * (1.0 - ctx.proj.at(d, d));
                let dld = -0.5 * ipg_ip.at(d, d);
                logvar_bar[d] += cb * (dtr + dld) * klf.sigma2[d];
            }
            // ∂/∂P of ½ tr(D(I−P)) is −½ D on the diagonal.
            for d in 0..z {
                *cg.p_bars[i].at_mut(d, d) += cb * (-0.5) * klf.sigma2[d];
            }
            // ∂/∂P of −½ lndet M = −½ (G − G(I−P)D − D(I−P)G).
            // t1 = (I−P)G and G is symmetric, so G(I−P)D is t1ᵀ with columns
            // scaled by σ² and D(I−P)G is t1 with rows scaled by σ².
            for a in 0..z {
                for bb in 0..z {
                    let g_ip_d = t1.at(bb, a) * klf.sigma2[bb];
                    let d_ip_g = klf.sigma2[a] * t1.at(a, bb);
                    let v = inv.at(a, bb) - g_ip_d - d_ip_g;
                    *cg.p_bars[i].at_mut(a, bb) += cb * (-0.5) * v;
                }
            }
        }
    }

    // Heads and trunk.
    let h = fwd.trunk_acts.last().unwrap();
    let mut h_bar = vec![0.0; h.len()];
    cg.grads.mean_head.weights.add_outer(1.0, &mu_bar, h);
    axpy(&mut cg.grads.mean_head.bias, 1.0, &mu_bar);
    let back = model.encoder.mean_head.weights.matvec_t(&mu_bar);
    axpy(&mut h_bar, 1.0, &back);
    if let (Some(head), Some(gr)) = (
        model.encoder.logvar_head.as_ref(),
        cg.grads.logvar_head.as_mut(),
    ) {
        if logvar_bar.iter().any(|v| *v != 0.0) {
            gr.weights.add_outer(1.0, &logvar_bar, h);
            axpy(&mut gr.bias, 1.0, &logvar_bar);
            let back = head.weights.matvec_t(&logvar_bar);
            axpy(&mut h_bar, 1.0, &back);
        }
    }
    let _ = mlp_backward(
        &model.encoder.trunk,
        &fwd.trunk_acts,
        &h_bar,
        &mut cg.grads.trunk,
    );
}

/// Backprop through an MLP given cached activations; returns the gradient
/// with respect to the input.
fn mlp_backward(
    mlp: &MlpParams,
    acts: &[Vec<f64>],
    out_grad: &[f64],
    grads: &mut MlpGrads,
) -> Vec<f64> {
    let mut g = out_grad.to_vec();
    for (l, layer) in mlp.layers.iter().enumerate().rev() {
        let out = &acts[l + 1];
        for (gi, &yi) in g.iter_mut().zip(out) {
            *gi *= layer.activation.derivative_from_output(yi);
        }
        grads.layers[l].weights.add_outer(1.0, &g, &acts[l]);
        axpy(&mut grads.layers[l].bias, 1.0, &g);
        g = layer.weights.matvec_t(&g);
    }
    g
}
