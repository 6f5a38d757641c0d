//! Concept subspace networks: autoencoder-style classifiers whose per-task
//! prototypes span affine subspaces of the latent space. The geometric
//! relationship between two tasks' subspaces — orthogonal, parallel, or
//! anywhere in between — is measured by an alignment score and steered
//! during training through the loss, which makes one architecture serve
//! fair classification (orthogonal subspaces), hierarchical classification
//! (parallel subspaces), and tunable intermediate correlations.
//!
//! The crate is organized around the lifecycle of such a model:
//!
//! - [`geometry`]: subspace construction (Gram-Schmidt), projection, and the
//!   alignment score between two subspaces.
//! - [`model`]: encoder/decoder MLPs, prototype sets, forward passes, and
//!   checkpoint serialization.
//! - [`losses`]: every training loss term and exact analytic gradients of
//!   the total loss with respect to all trainable parameters.
//! - [`training`]: initialization, SGD/Adam, the mini-batch loop, early
//!   stopping, and deterministic seeding.
//! - [`metrics`]: accuracies, fairness measures (linear probe, disparate
//!   impact, demographic disparity), the latent-intervention ratio `rho`,
//!   taxonomy average cost, and prototype minimum-spanning-tree edit
//!   distance.
//! - [`datasets`]: tabular CSV ingestion with fairness schemas, IDX image
//!   loading with derived hierarchy labels, and synthetic generators.
//!
//! Batch-level inner loops run data-parallel via rayon when the `parallel`
//! feature (default) is enabled; [`parallel::Parallelism::Sequential`] is a
//! single-threaded reference mode that produces bit-identical results.

pub mod datasets;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod training;

pub use error::{CsnError, Result};
pub use geometry::{alignment, build_subspace, orthogonal_component, project, ConceptSubspace};
pub use linalg::Mat;
pub use model::{CsnModel, EncoderParams, MlpParams, PrototypeSet};
pub use parallel::Parallelism;
