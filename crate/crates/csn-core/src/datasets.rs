//! Dataset ingestion and generation.
//!
//! Three sources are supported:
//!
//! - tabular CSV files described by a [`TabularSchema`] (one-hot categorical
//!   encoding, train-statistics z-scoring, a derived binary protected label,
//!   and a binary target),
//! - IDX image/label files (the big-endian format used by the MNIST-style
//!   distributions, optionally gzip-compressed) with an optional derived
//!   coarse label task,
//! - synthetic generators for toy worlds.
//!
//! Every loader is deterministic for a given (input, schema, seed): row
//! splits come from a seeded shuffle of row positions, and normalization
//! statistics are computed on the train split only.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CsnError, Result};
use crate::linalg::Mat;
use crate::model::CsnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.1;

/// A feature matrix with one integer label vector per classification task
/// and a per-row split tag.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Mat,
    pub labels: Vec<Vec<usize>>,
    pub class_counts: Vec<usize>,
    pub split: Vec<Split>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }

    pub fn num_features(&self) -> usize {
        self.x.cols
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Row views, optionally restricted to one split.
    pub fn xs(&self, split: Option<Split>) -> Vec<&[f64]> {
        (0..self.len())
            .filter(|&i| split.is_none_or(|s| self.split[i] == s))
            .map(|i| self.x.row(i))
            .collect()
    }

    pub fn task_labels(&self, task: usize, split: Option<Split>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| split.is_none_or(|s| self.split[i] == s))
            .map(|i| self.labels[task][i])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.split.len() != n {
            return Err(CsnError::DimensionMismatch {
                what: "split tags",
                expected: n,
                got: self.split.len(),
            });
        }
        if !self.x.is_finite() {
            return Err(CsnError::NonFinite("dataset features".into()));
        }
        if self.labels.len() != self.class_counts.len() {
            return Err(CsnError::DimensionMismatch {
                what: "class counts",
                expected: self.labels.len(),
                got: self.class_counts.len(),
            });
        }
        for (task, ys) in self.labels.iter().enumerate() {
            if ys.len() != n {
                return Err(CsnError::DimensionMismatch {
                    what: "label vector",
                    expected: n,
                    got: ys.len(),
                });
            }
            for &y in ys {
                if y >= self.class_counts[task] {
                    return Err(CsnError::LabelOutOfRange {
                        label: y,
                        classes: self.class_counts[task],
                    });
                }
            }
        }
        Ok(())
    }

    /// A copy of the dataset keeping only the given label tasks, in order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Dataset> {
        let mut labels = Vec::with_capacity(tasks.len());
        let mut class_counts = Vec::with_capacity(tasks.len());
        for &t in tasks {
            if t >= self.num_tasks() {
                return Err(CsnError::InvalidConcept {
                    index: t,
                    count: self.num_tasks(),
                });
            }
            labels.push(self.labels[t].clone());
            class_counts.push(self.class_counts[t]);
        }
        Ok(Dataset {
            x: self.x.clone(),
            labels,
            class_counts,
            split: self.split.clone(),
            feature_names: self.feature_names.clone(),
        })
    }

    pub fn check_labels_for(&self, model: &CsnModel) -> Result<()> {
        if self.num_tasks() != model.num_concepts() {
            return Err(CsnError::DimensionMismatch {
                what: "label task count",
                expected: model.num_concepts(),
                got: self.num_tasks(),
            });
        }
        if self.num_features() != model.input_dim {
            return Err(CsnError::DimensionMismatch {
                what: "feature width",
                expected: model.input_dim,
                got: self.num_features(),
            });
        }
        for (i, set) in model.concepts.iter().enumerate() {
            if self.class_counts[i] != set.num_classes {
                return Err(CsnError::DimensionMismatch {
                    what: "class count",
                    expected: set.num_classes,
                    got: self.class_counts[i],
                });
            }
        }
        Ok(())
    }

    /// Writes the dataset as CSV: features (named), labels, split tag.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        let mut header: Vec<String> = self.feature_names.clone();
        for t in 0..self.num_tasks() {
            header.push(format!("label_{t}"));
        }
        header.push("split".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut cells: Vec<String> = self.x.row(i).iter().map(|v| format!("{v}")).collect();
            for t in 0..self.num_tasks() {
                cells.push(self.labels[t][i].to_string());
            }
            cells.push(
                match self.split[i] {
                    Split::Train => "train",
                    Split::Val => "val",
                    Split::Test => "test",
                }
                .into(),
            );
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Concatenates a train-tagged and a test-tagged dataset, carving a
    /// seeded `val_fraction` of the train rows out as the validation split.
    pub fn merge_train_test(
        train: Dataset,
        test: Dataset,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Dataset> {
        if train.num_features() != test.num_features()
            || train.num_tasks() != test.num_tasks()
        {
            return Err(CsnError::Dataset(
                "train and test shapes do not match".into(),
            ));
        }
        let n_train = train.len();
        let mut x = train.x;
        x.data.extend_from_slice(&test.x.data);
        x.rows += test.x.rows;
        let mut labels = train.labels;
        for (t, ys) in labels.iter_mut().enumerate() {
            ys.extend_from_slice(&test.labels[t]);
        }
        let class_counts = train
            .class_counts
            .iter()
            .zip(&test.class_counts)
            .map(|(a, b)| *a.max(b))
            .collect();

        let mut split = vec![Split::Train; n_train];
        split.extend(vec![Split::Test; test.x.rows]);
        let n_val = ((n_train as f64) * val_fraction).floor() as usize;
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fisher_yates(&mut order, &mut rng);
        for &i in order.iter().take(n_val) {
            split[i] = Split::Val;
        }

        let ds = Dataset {
            x,
            labels,
            class_counts,
            split,
            feature_names: train.feature_names,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn fisher_yates(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Seeded 70/10/20 split assignment by row position.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5714); // distinct stream so splits don't couple to data draws
    fisher_yates(&mut order, &mut rng);
    let n_train = ((n as f64) * TRAIN_FRACTION).floor() as usize;
    let n_val = ((n as f64) * VAL_FRACTION).floor() as usize;
    let mut split = vec![Split::Test; n];
    for &i in order.iter().take(n_train) {
        split[i] = Split::Train;
    }
    for &i in order.iter().skip(n_train).take(n_val) {
        split[i] = Split::Val;
    }
    split
}

// ---------------------------------------------------------------------------
// Tabular ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Protected,
    Target,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// How the binary protected label is derived from the protected column.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ProtectedRule {
    /// Label 1 when the numeric value is strictly greater than `value`.
    GreaterThan { value: f64 },
    /// Label 1 when the cell equals `value` after trimming.
    Equals { value: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularSchema {
    pub columns: Vec<ColumnSpec>,
    /// Field delimiter; b',' for standard CSV, b' ' for space-separated.
    #[serde(default = "default_delim", with = "delim_serde")]
    pub delimiter: u8,
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Target cell value that maps to class 1 (the favorable outcome).
    pub positive_target: String,
    pub protected_rule: ProtectedRule,
}

fn default_delim() -> u8 {
    b','
}

fn default_true() -> bool {
    true
}

mod delim_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &u8, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&(*d as char).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u8, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii() => Ok(c as u8),
            _ => Err(serde::de::Error::custom("delimiter must be one ascii char")),
        }
    }
}

impl TabularSchema {
    pub fn validate(&self) -> Result<()> {
        let targets = self
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Target)
            .count();
        let protected = self
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Protected)
            .count();
        if targets != 1 {
            return Err(CsnError::Config(format!(
                "schema must declare exactly one target column, found {targets}"
            )));
        }
        if protected != 1 {
            return Err(CsnError::Config(format!(
                "schema must declare exactly one protected column, found {protected}"
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.columns {
            if !names.insert(&c.name) {
                return Err(CsnError::Config(format!("duplicate column {}", c.name)));
            }
        }
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "?"
}

/// Loads a delimited tabular file under a fairness schema.
///
/// Categorical columns are one-hot encoded over the categories observed in
/// the file (sorted for determinism); continuous columns are z-scored with
/// mean/std computed on the train split, with missing values imputed by the
/// train mean. Rows with a missing target or protected cell are dropped.
/// Labels are `[target, protected]`, both binary with 1 = positive/rule hit.
pub fn load_tabular(path: &Path, schema: &TabularSchema, seed: u64) -> Result<Dataset> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    // Map schema columns to field positions.
    let col_pos: Vec<usize> = if schema.has_header {
        let headers = reader.headers()?.clone();
        schema
            .columns
            .iter()
            .map(|c| {
                headers
                    .iter()
                    .position(|h| h == c.name)
                    .ok_or_else(|| CsnError::Dataset(format!("missing column '{}'", c.name)))
            })
            .collect::<Result<_>>()?
    } else {
        (0..schema.columns.len()).collect()
    };
    let width = schema.columns.len();

    // Raw cells per kept row, plus parsed target/protected labels.
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut y_labels: Vec<usize> = Vec::new();
    let mut s_labels: Vec<usize> = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        let line = ri + if schema.has_header { 2 } else { 1 };
        if record.len() < width && !(record.len() == 1 && record[0].is_empty()) {
            return Err(CsnError::BadRow {
                line,
                reason: format!("expected at least {width} fields, got {}", record.len()),
            });
        }
        if record.len() == 1 && record[0].is_empty() {
            continue; // blank line
        }
        let cells: Vec<String> = col_pos
            .iter()
            .map(|&p| record.get(p).unwrap_or("").trim().trim_end_matches('.').to_string())
            .collect();

        let mut target = None;
        let mut prot = None;
        for (c, spec) in schema.columns.iter().enumerate() {
            match spec.kind {
                ColumnKind::Target => {
                    if !is_missing(&cells[c]) {
                        target = Some((cells[c] == schema.positive_target) as usize);
                    }
                }
                ColumnKind::Protected => {
                    if !is_missing(&cells[c]) {
                        prot = Some(match &schema.protected_rule {
                            ProtectedRule::GreaterThan { value } => {
                                let v: f64 = cells[c].parse().map_err(|_| CsnError::BadRow {
                                    line,
                                    reason: format!(
                                        "protected column '{}' is not numeric: '{}'",
                                        spec.name, cells[c]
                                    ),
                                })?;
                                (v > *value) as usize
                            }
                            ProtectedRule::Equals { value } => (&cells[c] == value) as usize,
                        });
                    }
                }
                ColumnKind::Continuous => {
                    if !is_missing(&cells[c]) && cells[c].parse::<f64>().is_err() {
                        return Err(CsnError::BadRow {
                            line,
                            reason: format!(
                                "continuous column '{}' is not numeric: '{}'",
                                spec.name, cells[c]
                            ),
                        });
                    }
                }
                ColumnKind::Categorical => {}
            }
        }
        let (Some(y), Some(s)) = (target, prot) else {
            continue; // missing target or protected: drop the row
        };
        rows.push(cells);
        y_labels.push(y);
        s_labels.push(s);
    }

    let n = rows.len();
    if n == 0 {
        return Err(CsnError::Dataset("no usable rows".into()));
    }
    for (name, ys) in [("target", &y_labels), ("protected", &s_labels)] {
        let ones = ys.iter().sum::<usize>();
        if ones == 0 || ones == n {
            return Err(CsnError::Dataset(format!("{name} class is empty")));
        }
    }

    let split = assign_splits(n, seed);

    // Categorical vocabularies over all kept rows, sorted for determinism.
    let mut vocab: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (c, spec) in schema.columns.iter().enumerate() {
        if spec.kind == ColumnKind::Categorical {
            let mut vals: Vec<String> = rows
                .iter()
                .map(|r| {
                    if is_missing(&r[c]) {
                        "?".to_string()
                    } else {
                        r[c].clone()
                    }
                })
                .collect();
            vals.sort_unstable();
            vals.dedup();
            vocab.insert(c, vals);
        }
    }

    // Train statistics for continuous columns.
    let mut cont_stats: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for (c, spec) in schema.columns.iter().enumerate() {
        if spec.kind == ColumnKind::Continuous {
            let train_vals: Vec<f64> = rows
                .iter()
                .zip(&split)
                .filter(|(r, s)| **s == Split::Train && !is_missing(&r[c]))
                .map(|(r, _)| r[c].parse::<f64>().unwrap())
                .collect();
            if train_vals.is_empty() {
                return Err(CsnError::Dataset(format!(
                    "continuous column '{}' has no train values",
                    spec.name
                )));
            }
            let mean = train_vals.iter().sum::<f64>() / train_vals.len() as f64;
            let var = train_vals
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / train_vals.len() as f64;
            cont_stats.insert(c, (mean, var.sqrt()));
        }
    }

    // Feature layout.
    let mut feature_names = Vec::new();
    for (c, spec) in schema.columns.iter().enumerate() {
        match spec.kind {
            ColumnKind::Continuous => feature_names.push(spec.name.clone()),
            ColumnKind::Categorical => {
                for v in &vocab[&c] {
                    feature_names.push(format!("{}={}", spec.name, v));
                }
            }
            _ => {}
        }
    }
    let width_out = feature_names.len();
    let mut x = Mat::zeros(n, width_out);
    for (i, row) in rows.iter().enumerate() {
        let out = x.row_mut(i);
        let mut f = 0usize;
        for (c, spec) in schema.columns.iter().enumerate() {
            match spec.kind {
                ColumnKind::Continuous => {
                    let (mean, std) = cont_stats[&c];
                    let raw = if is_missing(&row[c]) {
                        mean
                    } else {
                        row[c].parse::<f64>().unwrap()
                    };
                    out[f] = if std > 1e-12 { (raw - mean) / std } else { 0.0 };
                    f += 1;
                }
                ColumnKind::Categorical => {
                    let vals = &vocab[&c];
                    let cell = if is_missing(&row[c]) { "?" } else { &row[c] };
                    // Vocabulary is sorted, so membership is a binary search.
                    if let Ok(pos) = vals.binary_search_by(|v| v.as_str().cmp(cell)) {
                        out[f + pos] = 1.0;
                    }
                    f += vals.len();
                }
                _ => {}
            }
        }
    }

    let ds = Dataset {
        x,
        labels: vec![y_labels, s_labels],
        class_counts: vec![2, 2],
        split,
        feature_names,
    };
    ds.validate()?;
    Ok(ds)
}

/// Schema for the published German credit file: 20 space-separated
/// attribute columns plus the 1/2 target, no header. The protected label is
/// age > 25 and the positive target is good credit ("1").
pub fn german_schema() -> TabularSchema {
    let cols = [
        ("status", ColumnKind::Categorical),
        ("duration", ColumnKind::Continuous),
        ("credit_history", ColumnKind::Categorical),
        ("purpose", ColumnKind::Categorical),
        ("amount", ColumnKind::Continuous),
        ("savings", ColumnKind::Categorical),
        ("employment", ColumnKind::Categorical),
        ("installment_rate", ColumnKind::Continuous),
        ("personal_status", ColumnKind::Categorical),
        ("other_debtors", ColumnKind::Categorical),
        ("residence_since", ColumnKind::Continuous),
        ("property", ColumnKind::Categorical),
        ("age", ColumnKind::Protected),
        ("other_installment", ColumnKind::Categorical),
        ("housing", ColumnKind::Categorical),
        ("existing_credits", ColumnKind::Continuous),
        ("job", ColumnKind::Categorical),
        ("num_dependents", ColumnKind::Continuous),
        ("telephone", ColumnKind::Categorical),
        ("foreign_worker", ColumnKind::Categorical),
        ("target", ColumnKind::Target),
    ];
    TabularSchema {
        columns: cols
            .iter()
            .map(|(n, k)| ColumnSpec {
                name: (*n).into(),
                kind: *k,
            })
            .collect(),
        delimiter: b' ',
        has_header: false,
        positive_target: "1".into(),
        protected_rule: ProtectedRule::GreaterThan { value: 25.0 },
    }
}

/// Schema for the published adult census file: comma-separated, no header.
/// The protected label is sex = Male and the positive target is ">50K".
pub fn adult_schema() -> TabularSchema {
    let cols = [
        ("age", ColumnKind::Continuous),
        ("workclass", ColumnKind::Categorical),
        ("fnlwgt", ColumnKind::Continuous),
        ("education", ColumnKind::Categorical),
        ("education_num", ColumnKind::Continuous),
        ("marital_status", ColumnKind::Categorical),
        ("occupation", ColumnKind::Categorical),
        ("relationship", ColumnKind::Categorical),
        ("race", ColumnKind::Categorical),
        ("sex", ColumnKind::Protected),
        ("capital_gain", ColumnKind::Continuous),
        ("capital_loss", ColumnKind::Continuous),
        ("hours_per_week", ColumnKind::Continuous),
        ("native_country", ColumnKind::Categorical),
        ("income", ColumnKind::Target),
    ];
    TabularSchema {
        columns: cols
            .iter()
            .map(|(n, k)| ColumnSpec {
                name: (*n).into(),
                kind: *k,
            })
            .collect(),
        delimiter: b',',
        has_header: false,
        positive_target: ">50K".into(),
        protected_rule: ProtectedRule::Equals {
            value: "Male".into(),
        },
    }
}

// ---------------------------------------------------------------------------
// IDX image loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Hierarchy {
    /// Second task: digit parity (0 = even, 1 = odd).
    DigitParity,
    /// Second task for the fashion labels: 0 = tops (t-shirt, pullover,
    /// coat, shirt), 1 = shoes (sandal, sneaker, ankle boot), 2 = other
    /// (trouser, dress, bag).
    FashionGroups,
    /// Single task.
    #[default]
    None,
}

impl Hierarchy {
    /// Coarse label for a fine label, plus the coarse class count.
    pub fn derive(&self, fine: usize) -> Option<usize> {
        match self {
            Hierarchy::DigitParity => Some(fine % 2),
            Hierarchy::FashionGroups => Some(match fine {
                0 | 2 | 4 | 6 => 0,
                5 | 7 | 9 => 1,
                _ => 2,
            }),
            Hierarchy::None => None,
        }
    }

    pub fn coarse_classes(&self) -> Option<usize> {
        match self {
            Hierarchy::DigitParity => Some(2),
            Hierarchy::FashionGroups => Some(3),
            Hierarchy::None => None,
        }
    }

    /// Fine → coarse map over `fine_classes` labels.
    pub fn group_map(&self, fine_classes: usize) -> Option<Vec<usize>> {
        self.coarse_classes()
            .map(|_| (0..fine_classes).map(|f| self.derive(f).unwrap()).collect())
    }
}

fn idx_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    let buf = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(flate2::bufread::GzDecoder::new(buf)))
    } else {
        Ok(Box::new(buf))
    }
}

fn read_u32_be(r: &mut dyn Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| CsnError::Idx {
        path: path.display().to_string(),
        reason: format!("truncated header: {e}"),
    })?;
    Ok(u32::from_be_bytes(b))
}

/// Loads an IDX image file and its label file. Pixels are scaled to [0, 1]
/// and flattened row-major; a second label task is derived per `hierarchy`.
/// All rows are tagged `Train`; see [`Dataset::merge_train_test`].
pub fn load_idx(images: &Path, labels: &Path, hierarchy: Hierarchy) -> Result<Dataset> {
    let mut ir = idx_reader(images)?;
    let magic = read_u32_be(ir.as_mut(), images)?;
    if magic != 2051 {
        return Err(CsnError::Idx {
            path: images.display().to_string(),
            reason: format!("bad image magic {magic:#x}, expected 0x803"),
        });
    }
    let count = read_u32_be(ir.as_mut(), images)? as usize;
    let rows = read_u32_be(ir.as_mut(), images)? as usize;
    let cols = read_u32_be(ir.as_mut(), images)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    ir.read_exact(&mut pixels).map_err(|e| CsnError::Idx {
        path: images.display().to_string(),
        reason: format!("truncated pixel data: {e}"),
    })?;

    let mut lr = idx_reader(labels)?;
    let magic = read_u32_be(lr.as_mut(), labels)?;
    if magic != 2049 {
        return Err(CsnError::Idx {
            path: labels.display().to_string(),
            reason: format!("bad label magic {magic:#x}, expected 0x801"),
        });
    }
    let lcount = read_u32_be(lr.as_mut(), labels)? as usize;
    if lcount != count {
        return Err(CsnError::Idx {
            path: labels.display().to_string(),
            reason: format!("{lcount} labels for {count} images"),
        });
    }
    let mut raw_labels = vec![0u8; lcount];
    lr.read_exact(&mut raw_labels).map_err(|e| CsnError::Idx {
        path: labels.display().to_string(),
        reason: format!("truncated label data: {e}"),
    })?;

    let dim = rows * cols;
    let mut x = Mat::zeros(count, dim);
    for (i, chunk) in pixels.chunks(dim).enumerate() {
        for (j, &p) in chunk.iter().enumerate() {
            *x.at_mut(i, j) = p as f64 / 255.0;
        }
    }
    let fine: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let fine_classes = fine.iter().max().map_or(0, |m| m + 1);
    let mut labels_out = vec![fine.clone()];
    let mut class_counts = vec![fine_classes];
    if let Some(coarse_classes) = hierarchy.coarse_classes() {
        labels_out.push(fine.iter().map(|&f| hierarchy.derive(f).unwrap()).collect());
        class_counts.push(coarse_classes);
    }
    let ds = Dataset {
        split: vec![Split::Train; count],
        x,
        labels: labels_out,
        class_counts,
        feature_names: (0..dim).map(|i| format!("px{i}")).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Noise applied to weather observations.
pub const WEATHER_NOISE_STD: f64 = 0.05;

/// A two-feature toy world: half the days are rainy and cold, half sunny
/// and hot. Cold temperatures and sunny precipitation are uniform on
/// [0, 0.2]; hot temperatures and rainy precipitation on [0.8, 1.0].
/// Observations add N(0, 0.05²) noise. Labels: task 0 is hot(1)/cold(0),
/// task 1 is rainy(1)/sunny(0).
pub fn gen_weather(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(CsnError::EmptyInput("weather size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, WEATHER_NOISE_STD).expect("valid normal");
    let mut x = Mat::zeros(n, 2);
    let mut hot = Vec::with_capacity(n);
    let mut rainy = Vec::with_capacity(n);
    for i in 0..n {
        let is_rainy = i < n / 2;
        let temp = if is_rainy {
            rng.random_range(0.0..0.2)
        } else {
            rng.random_range(0.8..1.0)
        };
        let precip = if is_rainy {
            rng.random_range(0.8..1.0)
        } else {
            rng.random_range(0.0..0.2)
        };
        *x.at_mut(i, 0) = temp + noise.sample(&mut rng);
        *x.at_mut(i, 1) = precip + noise.sample(&mut rng);
        hot.push(usize::from(!is_rainy));
        rainy.push(usize::from(is_rainy));
    }
    let ds = Dataset {
        split: assign_splits(n, seed),
        x,
        labels: vec![hot, rainy],
        class_counts: vec![2, 2],
        feature_names: vec!["temperature".into(), "precipitation".into()],
    };
    ds.validate()?;
    Ok(ds)
}

pub const FAIR_HIER_FEATURES: usize = 10;
pub const FAIR_HIER_NOISE_STD: f64 = 0.4;
pub const FAIR_HIER_GROUP_SCALE: f64 = 4.0;
pub const FAIR_HIER_ID_AXIS_SHARE: f64 = 3.0;
pub const FAIR_HIER_WITHIN_SCALE: f64 = 0.3;
pub const FAIR_HIER_ID_DENSE: f64 = 1.0;
pub const FAIR_HIER_INTERACTION_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairHierConfig {
    pub leaves: usize,
    pub groups: usize,
    pub identities: usize,
    pub identity_signal_strength: f64,
}

impl Default for FairHierConfig {
    fn default() -> Self {
        FairHierConfig {
            leaves: 8,
            groups: 2,
            identities: 8,
            identity_signal_strength: 1.0,
        }
    }
}

/// Synthetic three-task world: features are a leaf-dependent Gaussian
/// cluster center plus an identity-dependent offset (scaled by
/// `identity_signal_strength`) plus noise. Labels: leaf, the leaf's group
/// (contiguous blocks of leaves), and identity. Leaves and identities are
/// drawn independently.
pub fn gen_fair_hier(n: usize, seed: u64, cfg: &FairHierConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(CsnError::EmptyInput("generator size"));
    }
    if cfg.leaves < 2 || cfg.groups < 2 || cfg.identities < 2 {
        return Err(CsnError::Config(
            "leaves, groups, and identities must each be >= 2".into(),
        ));
    }
    if cfg.leaves % cfg.groups != 0 {
        return Err(CsnError::Config(format!(
            "{} leaves not divisible into {} groups",
            cfg.leaves, cfg.groups
        )));
    }
    if !(cfg.identity_signal_strength.is_finite() && cfg.identity_signal_strength >= 0.0) {
        return Err(CsnError::Config(
            "identity_signal_strength must be finite and >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, FAIR_HIER_NOISE_STD).expect("valid normal");
    let dim = FAIR_HIER_FEATURES;
    // Coordinate design: axis 0 carries the group separation plus an
    // identity lean (contaminated but strong); axes 1..=7 carry both the
    // within-group leaf offsets and the dense identity offsets, so
    // fine-grained structure is entangled with identity; the rest is noise.
    let group_scale = FAIR_HIER_GROUP_SCALE;
    let id_axis_share = FAIR_HIER_ID_AXIS_SHARE;
    let within_scale = FAIR_HIER_WITHIN_SCALE;
    let id_dense = FAIR_HIER_ID_DENSE;
    let entangled = dim.min(8);
    let leaf_centers: Vec<Vec<f64>> = (0..cfg.leaves)
        .map(|_| {
            (0..dim)
                .map(|d| {
                    if d >= 1 && d < entangled {
                        within_scale * unit.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let id_offsets: Vec<Vec<f64>> = (0..cfg.identities)
        .map(|_| {
            (0..dim)
                .map(|d| {
                    if d == 0 {
                        id_axis_share * unit.sample(&mut rng)
                    } else if d < entangled {
                        id_dense * unit.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let group_coef = |g: usize| {
        if cfg.groups == 1 {
            0.0
        } else {
            2.0 * g as f64 / (cfg.groups - 1) as f64 - 1.0
        }
    };
    // Leaf-identity interaction offsets: fine-grained leaf information is
    // carried jointly with identity, so purging identity features costs
    // fine-grained accuracy (the coarse axis survives).
    let inter_scale = FAIR_HIER_INTERACTION_SCALE;
    let interactions: Vec<Vec<Vec<f64>>> = (0..cfg.leaves)
        .map(|_| {
            (0..cfg.identities)
                .map(|_| {
                    (0..dim)
                        .map(|d| {
                            if d >= 1 && d < entangled {
                                inter_scale * unit.sample(&mut rng)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let per_group = cfg.leaves / cfg.groups;
    let mut x = Mat::zeros(n, dim);
    let mut leaf_l = Vec::with_capacity(n);
    let mut group_l = Vec::with_capacity(n);
    let mut id_l = Vec::with_capacity(n);
    for i in 0..n {
        let leaf = rng.random_range(0..cfg.leaves);
        let id = rng.random_range(0..cfg.identities);
        let group = leaf / per_group;
        let row = x.row_mut(i);
        for d in 0..dim {
            let group_part = if d == 0 {
                group_scale * group_coef(group)
            } else {
                0.0
            };
            row[d] = group_part
                + leaf_centers[leaf][d]
                + cfg.identity_signal_strength
                    * (id_offsets[id][d] + interactions[leaf][id][d])
                + noise.sample(&mut rng);
        }
        leaf_l.push(leaf);
        group_l.push(group);
        id_l.push(id);
    }
    let ds = Dataset {
        split: assign_splits(n, seed),
        x,
        labels: vec![leaf_l, group_l, id_l],
        class_counts: vec![cfg.leaves, cfg.groups, cfg.identities],
        feature_names: (0..dim).map(|d| format!("f{d}")).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Two linearly separable Gaussian blobs in the plane; a single binary
/// task. Handy for smoke tests and descent sanity checks.
pub fn gen_blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let mut x = Mat::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let cx = if label == 0 { -1.5 } else { 1.5 };
        *x.at_mut(i, 0) = cx + noise.sample(&mut rng);
        *x.at_mut(i, 1) = noise.sample(&mut rng);
        y.push(label);
    }
    Dataset {
        split: assign_splits(n, seed),
        x,
        labels: vec![y],
        class_counts: vec![2],
        feature_names: vec!["x0".into(), "x1".into()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_are_exact_within_rounding() {
        let split = assign_splits(1000, 7);
        let train = split.iter().filter(|s| **s == Split::Train).count();
        let val = split.iter().filter(|s| **s == Split::Val).count();
        let test = split.iter().filter(|s| **s == Split::Test).count();
        assert_eq!((train, val, test), (700, 100, 200));
        // Deterministic per seed.
        assert_eq!(assign_splits(1000, 7), split);
        assert_ne!(assign_splits(1000, 8), split);
    }

    fn write_toy_csv(dir: &Path, rows: &[&str], header: Option<&str>) -> std::path::PathBuf {
        let path = dir.join("toy.csv");
        let mut f = File::create(&path).unwrap();
        if let Some(h) = header {
            writeln!(f, "{h}").unwrap();
        }
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        path
    }

    fn toy_schema() -> TabularSchema {
        TabularSchema {
            columns: vec![
                ColumnSpec {
                    name: "color".into(),
                    kind: ColumnKind::Categorical,
                },
                ColumnSpec {
                    name: "size".into(),
                    kind: ColumnKind::Continuous,
                },
                ColumnSpec {
                    name: "age".into(),
                    kind: ColumnKind::Protected,
                },
                ColumnSpec {
                    name: "label".into(),
                    kind: ColumnKind::Target,
                },
            ],
            delimiter: b',',
            has_header: true,
            positive_target: "yes".into(),
            protected_rule: ProtectedRule::GreaterThan { value: 25.0 },
        }
    }

    #[test]
    fn one_hot_width_equals_category_count() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [
            "red,1.0,30,yes",
            "blue,2.0,20,no",
            "green,3.0,40,yes",
            "red,4.0,22,no",
            "blue,5.0,31,yes",
            "green,6.0,19,no",
            "red,7.0,33,yes",
            "blue,8.0,28,no",
            "green,9.0,27,yes",
            "red,10.0,24,no",
        ];
        let path = write_toy_csv(dir.path(), &rows, Some("color,size,age,label"));
        let ds = load_tabular(&path, &toy_schema(), 0).unwrap();
        // 3 colors one-hot + 1 continuous.
        assert_eq!(ds.num_features(), 4);
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.num_tasks(), 2);
        // Each row has exactly one hot color.
        for i in 0..ds.len() {
            let hot: f64 = ds.x.row(i)[..3].iter().sum();
            assert_eq!(hot, 1.0);
        }
        // Protected: age > 25.
        assert_eq!(ds.labels[1], vec![1, 0, 1, 0, 1, 0, 1, 1, 1, 0]);
    }

    #[test]
    fn missing_target_rows_dropped_and_continuous_imputed() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [
            "red,1.0,30,yes",
            "blue,,20,no",  // missing size: imputed
            "green,3.0,40,", // missing target: dropped
            "red,4.0,?,yes", // missing protected: dropped
            "blue,5.0,31,no",
            "green,6.0,19,yes",
            "red,7.0,33,no",
            "blue,8.0,28,yes",
        ];
        let path = write_toy_csv(dir.path(), &rows, Some("color,size,age,label"));
        let ds = load_tabular(&path, &toy_schema(), 1).unwrap();
        assert_eq!(ds.len(), 6);
    }

    #[test]
    fn unparseable_rows_reported_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let rows = ["red,1.0,30,yes", "blue,abc,20,no", "red,2.0,31,no"];
        let path = write_toy_csv(dir.path(), &rows, Some("color,size,age,label"));
        match load_tabular(&path, &toy_schema(), 0) {
            Err(CsnError::BadRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected BadRow, got {other:?}"),
        }
    }

    #[test]
    fn missing_schema_column_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let rows = ["red,1.0,30,yes"];
        let path = write_toy_csv(dir.path(), &rows, Some("color,size,age,wrong"));
        assert!(matches!(
            load_tabular(&path, &toy_schema(), 0),
            Err(CsnError::Dataset(_))
        ));
    }

    #[test]
    fn empty_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let rows = ["red,1.0,30,yes", "blue,2.0,31,yes", "green,2.0,33,yes"];
        let path = write_toy_csv(dir.path(), &rows, Some("color,size,age,label"));
        assert!(matches!(
            load_tabular(&path, &toy_schema(), 0),
            Err(CsnError::Dataset(_))
        ));
    }

    #[test]
    fn normalization_uses_train_statistics_only() {
        // Two files identical except the rows at test positions are
        // permuted among themselves; train-row features must be unchanged.
        let dir = tempfile::tempdir().unwrap();
        let mut rows: Vec<String> = (0..40)
            .map(|i| {
                let color = ["red", "blue"][i % 2];
                let label = ["yes", "no"][(i / 2) % 2];
                format!("{color},{}.5,{},{label}", i, 20 + (i % 20))
            })
            .collect();
        let base: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let path_a = write_toy_csv(dir.path(), &base, Some("color,size,age,label"));
        let ds_a = load_tabular(&path_a, &toy_schema(), 3).unwrap();

        let test_rows = ds_a.indices(Split::Test);
        assert!(test_rows.len() >= 2);
        rows.swap(test_rows[0], test_rows[1]);
        let permuted: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let dir_b = tempfile::tempdir().unwrap();
        let path_b = write_toy_csv(dir_b.path(), &permuted, Some("color,size,age,label"));
        let ds_b = load_tabular(&path_b, &toy_schema(), 3).unwrap();

        for &i in &ds_a.indices(Split::Train) {
            assert_eq!(ds_a.x.row(i), ds_b.x.row(i));
        }
    }

    fn write_idx(dir: &Path, images: &[[u8; 4]], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img.idx3-ubyte");
        let lp = dir.join("lab.idx1-ubyte");
        let mut f = File::create(&ip).unwrap();
        f.write_all(&2051u32.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
        let mut f = File::create(&lp).unwrap();
        f.write_all(&2049u32.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_roundtrip_with_parity_hierarchy() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(
            dir.path(),
            &[[0, 51, 102, 255], [255, 204, 153, 0]],
            &[7, 4],
        );
        let ds = load_idx(&ip, &lp, Hierarchy::DigitParity).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_features(), 4);
        assert_eq!(ds.x.row(0), &[0.0, 0.2, 0.4, 1.0]);
        // Digit 7 is odd, 4 is even.
        assert_eq!(ds.labels[1], vec![1, 0]);
        assert_eq!(ds.class_counts, vec![8, 2]);
    }

    #[test]
    fn fashion_grouping_matches_definition() {
        let h = Hierarchy::FashionGroups;
        // sandal(5), sneaker(7), ankle boot(9) are shoes.
        for shoe in [5, 7, 9] {
            assert_eq!(h.derive(shoe), Some(1));
        }
        for top in [0, 2, 4, 6] {
            assert_eq!(h.derive(top), Some(0));
        }
        for other in [1, 3, 8] {
            assert_eq!(h.derive(other), Some(2));
        }
    }

    #[test]
    fn idx_rejects_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[0, 0, 0, 0]], &[1, 2]);
        assert!(matches!(
            load_idx(&ip, &lp, Hierarchy::None),
            Err(CsnError::Idx { .. })
        ));
        let bad = dir.path().join("bad.idx3-ubyte");
        File::create(&bad)
            .unwrap()
            .write_all(&1234u32.to_be_bytes())
            .unwrap();
        assert!(matches!(
            load_idx(&bad, &lp, Hierarchy::None),
            Err(CsnError::Idx { .. })
        ));
    }

    #[test]
    fn idx_without_hierarchy_is_single_task() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[0, 0, 0, 0]], &[3]);
        let ds = load_idx(&ip, &lp, Hierarchy::None).unwrap();
        assert_eq!(ds.num_tasks(), 1);
    }

    #[test]
    fn weather_respects_construction() {
        let ds = gen_weather(500, 9).unwrap();
        assert_eq!(ds.len(), 500);
        // Reproducible per seed.
        let ds2 = gen_weather(500, 9).unwrap();
        assert_eq!(ds.x.data, ds2.x.data);
        // hot <-> sunny exactly (labels are complements).
        for i in 0..ds.len() {
            assert_eq!(ds.labels[0][i], 1 - ds.labels[1][i]);
        }
        // Noiseless temperature band: observations within 0.2 + 4σ.
        for i in 0..ds.len() {
            let t = ds.x.at(i, 0);
            if ds.labels[0][i] == 0 {
                assert!(t < 0.2 + 4.0 * WEATHER_NOISE_STD);
            } else {
                assert!(t > 0.8 - 4.0 * WEATHER_NOISE_STD);
            }
        }
    }

    #[test]
    fn fair_hier_group_is_leaf_block() {
        let cfg = FairHierConfig::default();
        let ds = gen_fair_hier(2000, 1, &cfg).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.labels[1][i], ds.labels[0][i] / 4);
            // group = (leaf < leaves/2 ? 0 : 1) for two groups
            assert_eq!(ds.labels[1][i], usize::from(ds.labels[0][i] >= 4));
        }
        assert!(matches!(
            gen_fair_hier(
                100,
                0,
                &FairHierConfig {
                    leaves: 7,
                    groups: 2,
                    ..Default::default()
                }
            ),
            Err(CsnError::Config(_))
        ));
    }

    #[test]
    fn generated_marginals_within_binomial_tolerance() {
        // Weather: p(rainy) = 1/2 by construction (exact). Fair-hier: leaf
        // and identity are uniform draws; check 3σ binomial bounds at n=1e4.
        let n = 10_000;
        let cfg = FairHierConfig::default();
        let ds = gen_fair_hier(n, 123, &cfg).unwrap();
        let p = 1.0 / cfg.leaves as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for leaf in 0..cfg.leaves {
            let rate = ds.labels[0].iter().filter(|&&l| l == leaf).count() as f64 / n as f64;
            assert!(
                (rate - p).abs() < 3.0 * sigma + 1e-9,
                "leaf {leaf} rate {rate}"
            );
        }
        let q = 1.0 / cfg.identities as f64;
        let sigq = (q * (1.0 - q) / n as f64).sqrt();
        for id in 0..cfg.identities {
            let rate = ds.labels[2].iter().filter(|&&l| l == id).count() as f64 / n as f64;
            assert!((rate - q).abs() < 3.0 * sigq + 1e-9, "id {id} rate {rate}");
        }
        let w = gen_weather(n, 77).unwrap();
        let rainy = w.labels[1].iter().sum::<usize>();
        assert_eq!(rainy, n / 2);
    }

    #[test]
    fn csv_writeback_roundtrips_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_weather(50, 2).unwrap();
        let path = dir.path().join("weather.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 51);
        assert_eq!(lines[0], "temperature,precipitation,label_0,label_1,split");
    }

    #[test]
    fn merge_train_test_carves_validation() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<[u8; 4]> = (0..20).map(|i| [i as u8; 4]).collect();
        let labs: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        let (ip, lp) = write_idx(dir.path(), &imgs, &labs);
        let train = load_idx(&ip, &lp, Hierarchy::DigitParity).unwrap();
        let test = load_idx(&ip, &lp, Hierarchy::DigitParity).unwrap();
        let ds = Dataset::merge_train_test(train, test, 0.1, 0).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.indices(Split::Test).len(), 20);
        assert_eq!(ds.indices(Split::Val).len(), 2);
        assert_eq!(ds.indices(Split::Train).len(), 18);
    }
}
