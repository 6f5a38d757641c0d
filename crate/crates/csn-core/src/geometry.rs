//! Concept subspaces: affine spans of prototype sets.
//!
//! A subspace is anchored at the first prototype and spanned by the
//! orthonormalized difference vectors to the remaining prototypes
//! (modified Gram-Schmidt with a re-orthogonalization pass). Alignment
//! between two subspaces is the mean squared cosine between their basis
//! vectors, 0 for orthogonal spans and 1 for parallel ones.

use crate::error::{CsnError, Result};
use crate::linalg::{axpy, dot, norm2, sub, Mat};

/// Residual norms at or below this are treated as linearly dependent
/// difference vectors and dropped from the basis.
pub const RANK_TOL: f64 = 1e-8;

/// An affine subspace of the latent space: `origin + span(basis columns)`.
///
/// The basis is stored as a Z×r matrix with orthonormal columns; r may be 0
/// for a single-prototype (point) subspace.
#[derive(Debug, Clone)]
pub struct ConceptSubspace {
    pub origin: Vec<f64>,
    pub basis: Mat,
}

impl ConceptSubspace {
    pub fn rank(&self) -> usize {
        self.basis.cols
    }

    pub fn ambient_dim(&self) -> usize {
        self.origin.len()
    }

    /// The projection matrix P = QQᵀ onto the linear span of the basis.
    pub fn projection_matrix(&self) -> Mat {
        let z = self.ambient_dim();
        let mut p = Mat::zeros(z, z);
        for c in 0..self.basis.cols {
            let col: Vec<f64> = (0..z).map(|r| self.basis.at(r, c)).collect();
            p.add_outer(1.0, &col, &col);
        }
        p
    }

    /// Coordinates Qᵀ(z − origin) of a point in the basis.
    pub fn coordinates(&self, z: &[f64]) -> Vec<f64> {
        let d = sub(z, &self.origin);
        // basis is Z×r, so coordinates are basisᵀ d.
        let mut y = vec![0.0; self.basis.cols];
        for c in 0..self.basis.cols {
            let mut s = 0.0;
            for r in 0..self.basis.rows {
                s += self.basis.at(r, c) * d[r];
            }
            y[c] = s;
        }
        y
    }
}

/// Builds the concept subspace spanned by a k×Z matrix of prototypes.
///
/// The origin is the first prototype; difference vectors to the others are
/// orthonormalized and near-dependent ones dropped at [`RANK_TOL`].
pub fn build_subspace(prototypes: &Mat) -> Result<ConceptSubspace> {
    let (sub, _tape) = build_subspace_tape(prototypes)?;
    Ok(sub)
}

/// Projects `z` onto the affine subspace: origin + QQᵀ(z − origin).
pub fn project(z: &[f64], s: &ConceptSubspace) -> Result<Vec<f64>> {
    if z.len() != s.ambient_dim() {
        return Err(CsnError::DimensionMismatch {
            what: "project",
            expected: s.ambient_dim(),
            got: z.len(),
        });
    }
    let y = s.coordinates(z);
    let mut out = s.origin.clone();
    for c in 0..s.basis.cols {
        let yc = y[c];
        for r in 0..s.basis.rows {
            out[r] += yc * s.basis.at(r, c);
        }
    }
    Ok(out)
}

/// The component of `z` orthogonal to the subspace: z − project(z, s).
pub fn orthogonal_component(z: &[f64], s: &ConceptSubspace) -> Result<Vec<f64>> {
    let p = project(z, s)?;
    Ok(sub(z, &p))
}

/// Alignment of two subspaces: mean over basis-vector pairs of the squared
/// cosine, `(1/mn)·Σᵢⱼ (Q₁ᵀQ₂)ᵢⱼ²`. Symmetric, in [0, 1]; 0 = orthogonal
/// spans, 1 = parallel. Undefined (error) if either subspace has rank 0.
pub fn alignment(s1: &ConceptSubspace, s2: &ConceptSubspace) -> Result<f64> {
    if s1.rank() == 0 || s2.rank() == 0 {
        return Err(CsnError::RankZeroSubspace);
    }
    if s1.ambient_dim() != s2.ambient_dim() {
        return Err(CsnError::DimensionMismatch {
            what: "alignment",
            expected: s1.ambient_dim(),
            got: s2.ambient_dim(),
        });
    }
    let (m, n) = (s1.rank(), s2.rank());
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let mut c = 0.0;
            for r in 0..s1.basis.rows {
                c += s1.basis.at(r, i) * s2.basis.at(r, j);
            }
            total += c * c;
        }
    }
    Ok(total / (m as f64 * n as f64))
}

// ---------------------------------------------------------------------------
// Differentiable Gram-Schmidt
// ---------------------------------------------------------------------------

/// One projection-subtraction step against a previously kept column.
struct GsStep {
    against: usize, // kept-column index
    coeff: f64,     // c = q_against · w  (before the subtraction)
}

struct GsColumn {
    input_index: usize, // which difference vector produced this column
    steps: Vec<GsStep>,
    // w states: w_states[0] is the raw difference vector, w_states[t+1] the
    // vector after step t; the last entry is normalized into the basis.
    w_states: Vec<Vec<f64>>,
    norm: f64,
}

/// Record of a Gram-Schmidt run, sufficient to backpropagate a gradient on
/// the orthonormal basis down to the prototypes that produced it.
pub struct SubspaceTape {
    cols: Vec<GsColumn>,
    num_prototypes: usize,
    dim: usize,
}

/// Builds the subspace and the tape used for gradient propagation.
pub fn build_subspace_tape(prototypes: &Mat) -> Result<(ConceptSubspace, SubspaceTape)> {
    let k = prototypes.rows;
    let z = prototypes.cols;
    if k == 0 {
        return Err(CsnError::EmptyInput("prototype list"));
    }
    for r in 0..k {
        if !prototypes.row(r).iter().all(|v| v.is_finite()) {
            return Err(CsnError::NonFinite(format!("prototype {r}")));
        }
    }
    let origin = prototypes.row(0).to_vec();

    let mut cols: Vec<GsColumn> = Vec::new();
    let mut basis_cols: Vec<Vec<f64>> = Vec::new();

    for i in 1..k {
        let v = sub(prototypes.row(i), &origin);
        let mut w = v.clone();
        let mut steps = Vec::new();
        let mut w_states = vec![w.clone()];
        // Two passes of projection subtraction keep the basis orthonormal
        // well below the 1e-6 contract even for graded inputs.
        for _pass in 0..2 {
            for (ci, q) in basis_cols.iter().enumerate() {
                let c = dot(q, &w);
                axpy(&mut w, -c, q);
                steps.push(GsStep { against: ci, coeff: c });
                w_states.push(w.clone());
            }
        }
        let norm = norm2(&w);
        if norm > RANK_TOL {
            let q: Vec<f64> = w.iter().map(|x| x / norm).collect();
            basis_cols.push(q);
            cols.push(GsColumn {
                input_index: i - 1,
                steps,
                w_states,
                norm,
            });
        }
    }

    let rank = basis_cols.len();
    let mut basis = Mat::zeros(z, rank);
    for (c, q) in basis_cols.iter().enumerate() {
        for r in 0..z {
            *basis.at_mut(r, c) = q[r];
        }
    }
    Ok((
        ConceptSubspace { origin, basis },
        SubspaceTape {
            cols,
            num_prototypes: k,
            dim: z,
        },
    ))
}

impl SubspaceTape {
    /// Backpropagates a gradient on the basis matrix (Z×r, column order as
    /// built) into a gradient on the k×Z prototype matrix, accumulating
    /// into `proto_grad`.
    pub fn backward(&self, subspace: &ConceptSubspace, basis_grad: &Mat, proto_grad: &mut Mat) {
        let z = self.dim;
        debug_assert_eq!(basis_grad.cols, self.cols.len());
        debug_assert_eq!(proto_grad.rows, self.num_prototypes);

        // Gradient accumulator per kept column (on the normalized q).
        let mut q_bars: Vec<Vec<f64>> = (0..self.cols.len())
            .map(|c| basis_grad.col(c))
            .collect();
        let q_cols: Vec<Vec<f64>> = (0..self.cols.len())
            .map(|c| subspace.basis.col(c))
            .collect();

        // Process in reverse build order so later columns' contributions to
        // earlier q gradients are complete before those columns are handled.
        for j in (0..self.cols.len()).rev() {
            let col = &self.cols[j];
            let q_bar = std::mem::take(&mut q_bars[j]);
            let q = &q_cols[j];

            // q = w / n with n = ‖w‖: w̄ = (q̄ − q (q·q̄)) / n
            let qdot = dot(q, &q_bar);
            let mut w_bar: Vec<f64> = q_bar
                .iter()
                .zip(q)
                .map(|(g, qi)| (g - qdot * qi) / col.norm)
                .collect();

            // Undo projection subtractions in reverse.
            for (t, step) in col.steps.iter().enumerate().rev() {
                let w_pre = &col.w_states[t];
                let q_i = &q_cols[step.against];
                let qd = dot(q_i, &w_bar);
                // q̄_i += −c·w̄' − (q_i·w̄')·w_pre
                {
                    let qb = &mut q_bars[step.against];
                    for r in 0..z {
                        qb[r] += -step.coeff * w_bar[r] - qd * w_pre[r];
                    }
                }
                // w̄ = w̄' − q_i (q_i · w̄')
                axpy(&mut w_bar, -qd, q_i);
            }

            // w_0 = p_{i+1} − p_0
            let pi = col.input_index + 1;
            axpy(proto_grad.row_mut(pi), 1.0, &w_bar);
            axpy(proto_grad.row_mut(0), -1.0, &w_bar);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protos(rows: &[Vec<f64>]) -> Mat {
        Mat::from_rows(rows)
    }

    #[test]
    fn single_difference_vector() {
        let s = build_subspace(&protos(&[vec![0.0, 0.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(s.origin, vec![0.0, 0.0]);
        assert_eq!(s.rank(), 1);
        assert!((s.basis.at(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.basis.at(1, 0).abs() < 1e-12);
    }

    #[test]
    fn point_subspace_has_rank_zero() {
        let s = build_subspace(&protos(&[vec![2.0, 3.0]])).unwrap();
        assert_eq!(s.origin, vec![2.0, 3.0]);
        assert_eq!(s.rank(), 0);
    }

    #[test]
    fn collinear_prototypes_give_rank_one() {
        // Oracle: rank of the difference matrix by Gaussian elimination.
        let pts = [vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        let diffs: Vec<Vec<f64>> = pts[1..].iter().map(|p| sub(p, &pts[0])).collect();
        assert_eq!(gaussian_rank(&diffs, 1e-10), 1);
        let s = build_subspace(&protos(&pts)).unwrap();
        assert_eq!(s.rank(), 1);
    }

    #[test]
    fn rank_matches_gaussian_elimination_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let k = rng.random_range(1..6);
            let z = rng.random_range(1..6);
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..z).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let diffs: Vec<Vec<f64>> = rows[1..].iter().map(|p| sub(p, &rows[0])).collect();
            let want = gaussian_rank(&diffs, 1e-10);
            let s = build_subspace(&protos(&rows)).unwrap();
            assert_eq!(s.rank(), want);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert!(matches!(
            build_subspace(&Mat::zeros(0, 3)),
            Err(CsnError::EmptyInput(_))
        ));
        let s = build_subspace(&protos(&[vec![0.0, 0.0], vec![1.0, 0.0]])).unwrap();
        assert!(project(&[1.0, 2.0, 3.0], &s).is_err());
        assert!(orthogonal_component(&[1.0], &s).is_err());
    }

    #[test]
    fn projection_examples() {
        let s = build_subspace(&protos(&[vec![0.0, 0.0], vec![1.0, 0.0]])).unwrap();
        // Point already in the subspace stays put.
        let p = project(&[0.3, 0.0], &s).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-9 && p[1].abs() < 1e-9);
        // Orthogonal coordinate dropped.
        let p = project(&[1.0, 1.0], &s).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        let o = orthogonal_component(&[1.0, 1.0], &s).unwrap();
        assert!(o[0].abs() < 1e-12 && (o[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_zero_projection_returns_origin() {
        let s = build_subspace(&protos(&[vec![2.0, 3.0]])).unwrap();
        let p = project(&[10.0, -4.0], &s).unwrap();
        assert_eq!(p, vec![2.0, 3.0]);
    }

    #[test]
    fn alignment_analytic_values() {
        let x = build_subspace(&protos(&[vec![0.0, 0.0], vec![1.0, 0.0]])).unwrap();
        let x2 = build_subspace(&protos(&[vec![5.0, 1.0], vec![3.0, 1.0]])).unwrap();
        let y = build_subspace(&protos(&[vec![0.0, 0.0], vec![0.0, 2.0]])).unwrap();
        let diag = build_subspace(&protos(&[vec![0.0, 0.0], vec![1.0, 1.0]])).unwrap();
        assert!((alignment(&x, &x2).unwrap() - 1.0).abs() < 1e-12);
        assert!(alignment(&x, &y).unwrap().abs() < 1e-12);
        assert!((alignment(&x, &diag).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_rejects_point_subspaces() {
        let pt = build_subspace(&protos(&[vec![0.0, 0.0]])).unwrap();
        let x = build_subspace(&protos(&[vec![0.0, 0.0], vec![1.0, 0.0]])).unwrap();
        assert!(matches!(alignment(&pt, &x), Err(CsnError::RankZeroSubspace)));
    }

    #[test]
    fn gram_schmidt_tape_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (k, z) = (4, 5);
        let mut p = Mat::zeros(k, z);
        for v in &mut p.data {
            *v = rng.random_range(-1.0..1.0);
        }
        // Scalar function of the basis: f = Σ w_rc · Q_rc with fixed weights.
        let mut wts = Mat::zeros(z, k - 1);
        for v in &mut wts.data {
            *v = rng.random_range(-1.0..1.0);
        }
        let f = |p: &Mat| -> f64 {
            let s = build_subspace(p).unwrap();
            assert_eq!(s.rank(), k - 1);
            let mut acc = 0.0;
            for r in 0..z {
                for c in 0..k - 1 {
                    acc += wts.at(r, c) * s.basis.at(r, c);
                }
            }
            acc
        };
        let (s, tape) = build_subspace_tape(&p).unwrap();
        let mut grad = Mat::zeros(k, z);
        tape.backward(&s, &wts, &mut grad);
        let eps = 1e-6;
        for r in 0..k {
            for c in 0..z {
                let mut pp = p.clone();
                *pp.at_mut(r, c) += eps;
                let mut pm = p.clone();
                *pm.at_mut(r, c) -= eps;
                let fd = (f(&pp) - f(&pm)) / (2.0 * eps);
                let g = grad.at(r, c);
                assert!(
                    (fd - g).abs() <= 1e-6 * (1.0 + fd.abs().max(g.abs())),
                    "({r},{c}): fd={fd} analytic={g}"
                );
            }
        }
    }
}

#[cfg(test)]
fn gaussian_rank(rows: &[Vec<f64>], tol: f64) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let mut m: Vec<Vec<f64>> = rows.to_vec();
    let (nr, nc) = (m.len(), m[0].len());
    let mut rank = 0;
    let mut row = 0;
    for col in 0..nc {
        let pivot = (row..nr).max_by(|&a, &b| {
            m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap()
        });
        let Some(p) = pivot else { break };
        if m[p][col].abs() <= tol {
            continue;
        }
        m.swap(row, p);
        for r in row + 1..nr {
            let f = m[r][col] / m[row][col];
            for c in col..nc {
                m[r][c] -= f * m[row][c];
            }
        }
        rank += 1;
        row += 1;
        if row == nr {
            break;
        }
    }
    rank
}
