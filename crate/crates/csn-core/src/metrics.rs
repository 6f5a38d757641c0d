//! Evaluation: accuracies, fairness measures, the latent-intervention
//! ratio, taxonomy costs, and prototype tree recovery.
//!
//! Fairness side: `probe_s_accuracy` trains a fixed-recipe linear probe to
//! recover the protected label from latents, `disparate_impact` is the min
//! ratio of group positive rates, `demographic_disparity` their absolute
//! gap. `rho` measures how much a gradient nudge of one task's belief moves
//! another task's belief.
//!
//! Hierarchy side: `average_cost` is the mean taxonomy-tree distance
//! between predicted and true leaves, and `edit_distance` compares the
//! minimum spanning tree of the learned prototypes against the ground-truth
//! taxonomy tree as directed edge sets.

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Split};
use crate::error::{CsnError, Result};
use crate::linalg::{squared_distance, Mat};
use crate::model::{argmax_lowest, CsnModel};
use crate::parallel::{map_chunks, Parallelism};

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(CsnError::EmptyInput("accuracy inputs"));
    }
    if predictions.len() != labels.len() {
        return Err(CsnError::DimensionMismatch {
            what: "accuracy inputs",
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Probe training recipe, fixed for comparability.
const PROBE_EPOCHS: usize = 200;
const PROBE_LR: f64 = 0.01;
const PROBE_HOLDOUT: f64 = 0.2;

/// Held-out accuracy of a softmax linear probe trained to predict the
/// protected label from latent vectors (seeded 80/20 split, full-batch
/// gradient descent, 200 epochs at lr 0.01).
pub fn probe_s_accuracy(latents: &Mat, s_labels: &[usize], seed: u64) -> Result<f64> {
    let n = latents.rows;
    if n != s_labels.len() {
        return Err(CsnError::DimensionMismatch {
            what: "probe labels",
            expected: n,
            got: s_labels.len(),
        });
    }
    if n < 2 {
        return Err(CsnError::EmptyInput("probe inputs"));
    }
    let classes = s_labels.iter().max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; classes];
        for &l in s_labels {
            seen[l] = true;
        }
        seen.iter().filter(|b| **b).count()
    };
    if distinct < 2 {
        return Err(CsnError::SingleClass);
    }

    use rand::{Rng, SeedableRng};
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_test = ((n as f64) * PROBE_HOLDOUT).floor().max(1.0) as usize;
    let (test_idx, train_idx) = order.split_at(n_test);

    let d = latents.cols;
    let mut w = Mat::zeros(classes, d);
    let mut b = vec![0.0; classes];
    let scale = 1.0 / train_idx.len() as f64;
    for _ in 0..PROBE_EPOCHS {
        let mut gw = Mat::zeros(classes, d);
        let mut gb = vec![0.0; classes];
        for &i in train_idx {
            let x = latents.row(i);
            let mut logits = w.matvec(x);
            for (l, bi) in logits.iter_mut().zip(&b) {
                *l += bi;
            }
            let maxl = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - maxl).exp()).collect();
            let zsum: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / zsum;
                let err = p - if c == s_labels[i] { 1.0 } else { 0.0 };
                let grow = gw.row_mut(c);
                for (g, xv) in grow.iter_mut().zip(x) {
                    *g += scale * err * xv;
                }
                gb[c] += scale * err;
            }
        }
        for c in 0..classes {
            let wr = w.row_mut(c);
            for (wv, gv) in wr.iter_mut().zip(gw.row(c)) {
                *wv -= PROBE_LR * gv;
            }
            b[c] -= PROBE_LR * gb[c];
        }
    }

    let mut hits = 0usize;
    for &i in test_idx {
        let mut logits = w.matvec(latents.row(i));
        for (l, bi) in logits.iter_mut().zip(&b) {
            *l += bi;
        }
        if argmax_lowest(&logits) == s_labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_idx.len() as f64)
}

/// Disparate impact: min(r0/r1, r1/r0) of group positive-prediction rates.
/// 0 when exactly one rate is zero, 1 when both are.
pub fn disparate_impact(predictions: &[usize], s: &[usize]) -> Result<f64> {
    let (r0, r1) = group_rates(predictions, s)?;
    Ok(match (r0 == 0.0, r1 == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (r0 / r1).min(r1 / r0),
    })
}

/// Demographic disparity: |r0 − r1| of group positive-prediction rates.
pub fn demographic_disparity(predictions: &[usize], s: &[usize]) -> Result<f64> {
    let (r0, r1) = group_rates(predictions, s)?;
    Ok((r0 - r1).abs())
}

fn group_rates(predictions: &[usize], s: &[usize]) -> Result<(f64, f64)> {
    if predictions.len() != s.len() {
        return Err(CsnError::DimensionMismatch {
            what: "group rates",
            expected: s.len(),
            got: predictions.len(),
        });
    }
    let mut count = [0usize; 2];
    let mut pos = [0usize; 2];
    for (&p, &g) in predictions.iter().zip(s) {
        if g > 1 || p > 1 {
            return Err(CsnError::Dataset(
                "disparate impact requires binary predictions and groups".into(),
            ));
        }
        count[g] += 1;
        pos[g] += p;
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(CsnError::EmptyInput("protected group"));
    }
    Ok((
        pos[0] as f64 / count[0] as f64,
        pos[1] as f64 / count[1] as f64,
    ))
}

/// Samples with a source-belief change smaller than this are excluded from
/// the rho mean.
pub const RHO_EXCLUSION: f64 = 1e-8;

/// Latent-intervention ratio between two tasks: for each sample, take one
/// ascent step of the source task's classification loss in latent space
/// (z' = z + ∇loss), then report the mean ratio of the target task's belief
/// change (at its originally predicted class) to the source task's belief
/// change (at the true class).
pub fn rho(
    model: &CsnModel,
    data: &Dataset,
    split: Option<Split>,
    source: usize,
    target: usize,
    mode: Parallelism,
) -> Result<f64> {
    if source >= model.num_concepts() || target >= model.num_concepts() {
        return Err(CsnError::InvalidConcept {
            index: source.max(target),
            count: model.num_concepts(),
        });
    }
    let xs = data.xs(split);
    if xs.is_empty() {
        return Err(CsnError::EmptyInput("rho dataset"));
    }
    let src_labels = data.task_labels(source, split);

    let ratios: Vec<Result<Option<f64>>> = map_chunks(xs.len(), mode, |range| {
        range
            .map(|i| rho_sample(model, xs[i], src_labels[i], source, target))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();

    let mut sum = 0.0;
    let mut kept = 0usize;
    for r in ratios {
        if let Some(v) = r? {
            sum += v;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(CsnError::AllSamplesExcluded);
    }
    Ok(sum / kept as f64)
}

fn rho_sample(
    model: &CsnModel,
    x: &[f64],
    src_true: usize,
    source: usize,
    target: usize,
) -> Result<Option<f64>> {
    let (z, _) = model.encode(x)?;
    let p_src = model.concept_distribution(&z, source)?;
    let p_tgt = model.concept_distribution(&z, target)?;
    let tgt_star = argmax_lowest(&p_tgt);

    // ∇_z of −ln(source class mass): distance-space gradient chained
    // through d_j = ‖z − p_j‖².
    let set = &model.concepts[source];
    let dists = model.distances(&z, source)?;
    let mut dist_grad = vec![0.0; dists.len()];
    crate::model::cross_entropy_distance_grad(
        &dists,
        &set.class_of,
        set.num_classes,
        src_true,
        &mut dist_grad,
        1.0,
    );
    let mut z2 = z.clone();
    for (j, &g) in dist_grad.iter().enumerate() {
        let p = set.prototypes.row(j);
        for r in 0..z2.len() {
            z2[r] += g * 2.0 * (z[r] - p[r]);
        }
    }

    let p_src2 = model.concept_distribution(&z2, source)?;
    let p_tgt2 = model.concept_distribution(&z2, target)?;
    let d_src = p_src2[src_true] - p_src[src_true];
    let d_tgt = p_tgt2[tgt_star] - p_tgt[tgt_star];
    if d_src.abs() < RHO_EXCLUSION {
        return Ok(None);
    }
    Ok(Some(d_tgt / d_src))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairnessReport {
    pub y_acc: f64,
    pub s_acc: f64,
    pub di: f64,
    pub dd05: f64,
    pub rho: f64,
}

/// Computes the full fairness report for a trained model: target accuracy,
/// protected-probe accuracy on latents, disparate impact, demographic
/// disparity, and rho from a protected-belief nudge to the target belief.
pub fn fairness_report(
    model: &CsnModel,
    data: &Dataset,
    split: Split,
    y_concept: usize,
    s_concept: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<FairnessReport> {
    let xs = data.xs(Some(split));
    if xs.is_empty() {
        return Err(CsnError::EmptyInput("fairness split"));
    }
    let y_true = data.task_labels(y_concept, Some(split));
    let s_true = data.task_labels(s_concept, Some(split));

    let preds: Vec<Result<Vec<usize>>> = map_chunks(xs.len(), mode, |range| {
        range.map(|i| model.predict(xs[i])).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let mut y_pred = Vec::with_capacity(xs.len());
    for p in preds {
        y_pred.push(p?[y_concept]);
    }

    let mut latents = Mat::zeros(xs.len(), model.latent_dim);
    for (i, x) in xs.iter().enumerate() {
        let (mu, _) = model.encode(x)?;
        latents.row_mut(i).copy_from_slice(&mu);
    }

    Ok(FairnessReport {
        y_acc: accuracy(&y_pred, &y_true)?,
        s_acc: probe_s_accuracy(&latents, &s_true, seed)?,
        di: disparate_impact(&y_pred, &s_true)?,
        dd05: demographic_disparity(&y_pred, &s_true)?,
        rho: rho(model, data, Some(split), s_concept, y_concept, mode)?,
    })
}

// ---------------------------------------------------------------------------
// Taxonomy and tree metrics
// ---------------------------------------------------------------------------

/// A rooted label tree. Level 0 holds the leaves; `parents[l][i]` is the
/// level-(l+1) node above node `i` of level `l`. Nodes of the top level all
/// attach to a single implicit root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Taxonomy {
    pub level_sizes: Vec<usize>,
    pub parents: Vec<Vec<usize>>,
}

impl Taxonomy {
    /// Two-level taxonomy: `group_of[leaf]` gives each leaf's parent.
    pub fn two_level(groups: usize, group_of: Vec<usize>) -> Result<Taxonomy> {
        let t = Taxonomy {
            level_sizes: vec![group_of.len(), groups],
            parents: vec![group_of],
        };
        t.validate()?;
        Ok(t)
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn leaves(&self) -> usize {
        self.level_sizes[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_sizes.is_empty() || self.level_sizes.iter().any(|&s| s == 0) {
            return Err(CsnError::Config("taxonomy has an empty level".into()));
        }
        if self.parents.len() + 1 != self.level_sizes.len() {
            return Err(CsnError::Config(
                "taxonomy needs one parent map per non-top level".into(),
            ));
        }
        for (l, map) in self.parents.iter().enumerate() {
            if map.len() != self.level_sizes[l] {
                return Err(CsnError::Config(format!(
                    "parent map {l} covers {} of {} nodes",
                    map.len(),
                    self.level_sizes[l]
                )));
            }
            for &p in map {
                if p >= self.level_sizes[l + 1] {
                    return Err(CsnError::Config(format!(
                        "parent {p} out of range at level {}",
                        l + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Path of ancestors of a leaf, from the leaf's level-1 parent up to
    /// the top level.
    fn ancestors(&self, leaf: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.levels());
        let mut node = leaf;
        for map in &self.parents {
            node = map[node];
            out.push(node);
        }
        out
    }

    /// Tree-path length between two leaves; 0 when equal, 2 for siblings,
    /// +2 for every extra level up to the lowest common ancestor.
    pub fn leaf_distance(&self, a: usize, b: usize) -> Result<usize> {
        let leaves = self.leaves();
        for l in [a, b] {
            if l >= leaves {
                return Err(CsnError::LabelNotInTaxonomy { label: l, leaves });
            }
        }
        if a == b {
            return Ok(0);
        }
        let pa = self.ancestors(a);
        let pb = self.ancestors(b);
        for (depth, (x, y)) in pa.iter().zip(&pb).enumerate() {
            if x == y {
                return Ok(2 * (depth + 1));
            }
        }
        // Only met at the implicit root.
        Ok(2 * (self.levels()))
    }
}

/// Mean taxonomy distance between predicted and true leaf labels.
pub fn average_cost(predictions: &[usize], labels: &[usize], tax: &Taxonomy) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(CsnError::EmptyInput("average cost inputs"));
    }
    let mut total = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        total += tax.leaf_distance(p, l)?;
    }
    Ok(total as f64 / predictions.len() as f64)
}

/// Mean taxonomy distance over mispredicted samples only; 0 if there are
/// no errors.
pub fn average_cost_errors_only(
    predictions: &[usize],
    labels: &[usize],
    tax: &Taxonomy,
) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(CsnError::EmptyInput("average cost inputs"));
    }
    let mut total = 0usize;
    let mut errors = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        if p != l {
            total += tax.leaf_distance(p, l)?;
            errors += 1;
        }
    }
    Ok(if errors == 0 {
        0.0
    } else {
        total as f64 / errors as f64
    })
}

/// A directed tree over all prototypes plus the origin. Node order is
/// concept-major (concept index, then prototype index) with the origin
/// last; every edge points from the lower- to the higher-ordered node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeTree {
    pub node_names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    /// Euclidean edge lengths; zero for taxonomy-derived trees.
    pub lengths: Vec<f64>,
}

impl PrototypeTree {
    pub fn num_nodes(&self) -> usize {
        self.node_names.len()
    }

    pub fn total_length(&self) -> f64 {
        self.lengths.iter().sum()
    }

    fn edge_set(&self) -> std::collections::BTreeSet<(usize, usize)> {
        self.edges.iter().cloned().collect()
    }
}

fn prototype_node_names(model: &CsnModel) -> Vec<String> {
    let mut names = Vec::new();
    for (i, set) in model.concepts.iter().enumerate() {
        for j in 0..set.num_prototypes() {
            names.push(format!("c{i}p{j}"));
        }
    }
    names.push("origin".into());
    names
}

/// Minimum spanning tree over the complete graph of all prototypes and the
/// origin, with Euclidean edge lengths. Kruskal with ties broken by the
/// lexicographically smallest node-index pair; edges directed low → high in
/// the global node order.
pub fn prototype_mst(model: &CsnModel) -> Result<PrototypeTree> {
    let mut points: Vec<Vec<f64>> = Vec::new();
    for set in &model.concepts {
        for j in 0..set.num_prototypes() {
            points.push(set.prototypes.row(j).to_vec());
        }
    }
    points.push(vec![0.0; model.latent_dim]);
    let n = points.len();
    if n < 2 {
        return Err(CsnError::EmptyInput("prototype set"));
    }

    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in u + 1..n {
            edges.push((squared_distance(&points[u], &points[v]).sqrt(), u, v));
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let root = find(parent, parent[x]);
            parent[x] = root;
        }
        parent[x]
    }
    let mut kept = Vec::with_capacity(n - 1);
    let mut lengths = Vec::with_capacity(n - 1);
    for (w, u, v) in edges {
        let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
        if ru != rv {
            parent[ru] = rv;
            kept.push((u, v));
            lengths.push(w);
            if kept.len() == n - 1 {
                break;
            }
        }
    }
    kept.sort_unstable();
    Ok(PrototypeTree {
        node_names: prototype_node_names(model),
        edges: kept,
        lengths,
    })
}

/// The ground-truth tree induced by a taxonomy under the fixed node
/// correspondence: concept `l` prototype `i` is level-`l` node `i`, and the
/// origin is the root. Requires one prototype per class on every concept.
pub fn taxonomy_tree(model: &CsnModel, tax: &Taxonomy) -> Result<PrototypeTree> {
    tax.validate()?;
    if model.num_concepts() != tax.levels() {
        return Err(CsnError::NodeSetMismatch(format!(
            "{} concepts vs {} taxonomy levels",
            model.num_concepts(),
            tax.levels()
        )));
    }
    let mut offsets = Vec::with_capacity(tax.levels());
    let mut total = 0usize;
    for (l, set) in model.concepts.iter().enumerate() {
        if set.num_prototypes() != tax.level_sizes[l] || set.num_classes != tax.level_sizes[l] {
            return Err(CsnError::NodeSetMismatch(format!(
                "concept {l} has {} prototypes for a level of {} nodes",
                set.num_prototypes(),
                tax.level_sizes[l]
            )));
        }
        offsets.push(total);
        total += set.num_prototypes();
    }
    let root = total;
    let mut edges = Vec::new();
    for (l, map) in tax.parents.iter().enumerate() {
        for (child, &par) in map.iter().enumerate() {
            let a = offsets[l] + child;
            let b = offsets[l + 1] + par;
            edges.push((a.min(b), a.max(b)));
        }
    }
    let top = tax.levels() - 1;
    for i in 0..tax.level_sizes[top] {
        let a = offsets[top] + i;
        edges.push((a.min(root), a.max(root)));
    }
    edges.sort_unstable();
    let n_edges = edges.len();
    Ok(PrototypeTree {
        node_names: prototype_node_names(model),
        edges,
        lengths: vec![0.0; n_edges],
    })
}

/// Size of the symmetric difference of two directed edge sets under the
/// identity node correspondence.
pub fn edit_distance(tree: &PrototypeTree, truth: &PrototypeTree) -> Result<usize> {
    if tree.node_names != truth.node_names {
        return Err(CsnError::NodeSetMismatch(format!(
            "{} vs {} nodes",
            tree.num_nodes(),
            truth.num_nodes()
        )));
    }
    let a = tree.edge_set();
    let b = truth.edge_set();
    Ok(a.symmetric_difference(&b).count())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub y0_acc: f64,
    pub y1_acc: f64,
    pub avg_cost: f64,
    pub avg_cost_errors_only: f64,
    pub edit_distance: usize,
}

/// Hierarchy metrics for a two-concept model: fine and coarse accuracies,
/// taxonomy average cost of the fine predictions, and the edit distance of
/// the prototype MST against the taxonomy tree.
pub fn hierarchy_report(
    model: &CsnModel,
    data: &Dataset,
    split: Split,
    tax: &Taxonomy,
    mode: Parallelism,
) -> Result<HierarchyReport> {
    let xs = data.xs(Some(split));
    if xs.is_empty() {
        return Err(CsnError::EmptyInput("hierarchy split"));
    }
    let preds: Vec<Result<Vec<usize>>> = map_chunks(xs.len(), mode, |range| {
        range.map(|i| model.predict(xs[i])).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let mut fine = Vec::with_capacity(xs.len());
    let mut coarse = Vec::with_capacity(xs.len());
    for p in preds {
        let p = p?;
        fine.push(p[0]);
        coarse.push(p[1]);
    }
    let fine_true = data.task_labels(0, Some(split));
    let coarse_true = data.task_labels(1, Some(split));
    let mst = prototype_mst(model)?;
    let truth = taxonomy_tree(model, tax)?;
    Ok(HierarchyReport {
        y0_acc: accuracy(&fine, &fine_true)?,
        y1_acc: accuracy(&coarse, &coarse_true)?,
        avg_cost: average_cost(&fine, &fine_true, tax)?,
        avg_cost_errors_only: average_cost_errors_only(&fine, &fine_true, tax)?,
        edit_distance: edit_distance(&mst, &truth)?,
    })
}
