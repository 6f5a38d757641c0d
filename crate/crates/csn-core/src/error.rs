use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Error, Debug)]
pub enum CsnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("concept index {index} out of range (model has {count} concepts)")]
    InvalidConcept { index: usize, count: usize },

    #[error("alignment is undefined for a rank-0 (single-point) subspace")]
    RankZeroSubspace,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("KL loss weight is nonzero but the encoder is not variational")]
    KlWithoutVariationalEncoder,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {term}")]
    Diverged { epoch: usize, term: String },

    #[error("single-class input where at least two classes are required")]
    SingleClass,

    #[error("all samples were excluded from the rho estimate")]
    AllSamplesExcluded,

    #[error("tree node sets do not match: {0}")]
    NodeSetMismatch(String),

    #[error("label {label} is not a leaf of the taxonomy ({leaves} leaves)")]
    LabelNotInTaxonomy { label: usize, leaves: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("bad IDX file {path}: {reason}")]
    Idx { path: String, reason: String },

    #[error("row {line}: {reason}")]
    BadRow { line: usize, reason: String },

    #[error("unsupported checkpoint format version {0}")]
    FormatVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CsnError>;
