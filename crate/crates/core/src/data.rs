//! Tabular dataset ingestion and preprocessing.
//!
//! Columns are inferred numeric iff every non-missing entry parses as a real;
//! anything else is categorical. Preprocessing is fitted on the training
//! split only: numeric columns are min-max scaled to [0,1] (training mean
//! imputation for missing values), categorical columns expand to one-hot
//! indicator nodes, and test-time values are clamped back into [0,1].

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("row error at line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("class coverage error: {0}")]
    ClassCoverage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Target,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnDescriptor {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub columns: Vec<ColumnDescriptor>,
    /// Class label vocabulary in first-appearance order.
    pub classes: Vec<String>,
    pub target_index: usize,
}

impl DatasetSchema {
    pub fn feature_columns(&self) -> impl Iterator<Item = (usize, &ColumnDescriptor)> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind != ColumnKind::Target)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Number(f64),
    Text(String),
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularDataset {
    pub schema: DatasetSchema,
    pub rows: Vec<Vec<Cell>>,
    pub labels: Vec<usize>,
    /// One tag per row; `None` until `split_dataset` has run.
    pub splits: Option<Vec<Split>>,
}

impl TabularDataset {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.columns.len() - 1
    }

    pub fn indices_of(&self, which: Split) -> Vec<usize> {
        match &self.splits {
            Some(tags) => tags
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == which)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }
}

fn is_missing(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || t == "?" || t == "NA" || t == "nan" || t == "NaN"
}

/// Loads an RFC-4180 style CSV with a header row, inferring column kinds and
/// mapping target labels to 0..K-1 in first-appearance order.
pub fn load_csv(path: &Path, target: &str) -> Result<TabularDataset, DataError> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Format(format!("cannot read header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if headers.is_empty() {
        return Err(DataError::Format("empty file".into()));
    }
    let target_index = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| DataError::Schema(format!("target column '{target}' not found")))?;

    let n_cols = headers.len();
    let mut raw_rows: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Row {
            line: i + 2,
            message: e.to_string(),
        })?;
        if record.len() != n_cols {
            return Err(DataError::Row {
                line: i + 2,
                message: format!("expected {n_cols} fields, got {}", record.len()),
            });
        }
        raw_rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    if raw_rows.is_empty() {
        return Err(DataError::Format("no data rows".into()));
    }

    // numeric iff every non-missing entry parses as a real
    let mut numeric = vec![true; n_cols];
    for row in &raw_rows {
        for (c, v) in row.iter().enumerate() {
            if c != target_index && numeric[c] && !is_missing(v) && v.parse::<f64>().is_err() {
                numeric[c] = false;
            }
        }
    }

    let columns: Vec<ColumnDescriptor> = headers
        .iter()
        .enumerate()
        .map(|(c, name)| ColumnDescriptor {
            name: name.clone(),
            kind: if c == target_index {
                ColumnKind::Target
            } else if numeric[c] {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            },
        })
        .collect();

    let mut classes: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(raw_rows.len());
    let mut rows = Vec::with_capacity(raw_rows.len());
    for (i, raw) in raw_rows.iter().enumerate() {
        let label_raw = raw[target_index].trim();
        if is_missing(label_raw) {
            return Err(DataError::Row {
                line: i + 2,
                message: "missing target value".into(),
            });
        }
        let label = match classes.iter().position(|c| c == label_raw) {
            Some(idx) => idx,
            None => {
                classes.push(label_raw.to_string());
                classes.len() - 1
            }
        };
        labels.push(label);
        let mut cells = Vec::with_capacity(n_cols);
        for (c, v) in raw.iter().enumerate() {
            if c == target_index {
                cells.push(Cell::Text(label_raw.to_string()));
            } else if is_missing(v) {
                cells.push(Cell::Missing);
            } else if numeric[c] {
                let parsed = v.parse::<f64>().map_err(|e| DataError::Row {
                    line: i + 2,
                    message: format!("column '{}': {e}", headers[c]),
                })?;
                cells.push(Cell::Number(parsed));
            } else {
                cells.push(Cell::Text(v.to_string()));
            }
        }
        rows.push(cells);
    }

    Ok(TabularDataset {
        schema: DatasetSchema {
            columns,
            classes,
            target_index,
        },
        rows,
        labels,
        splits: None,
    })
}

/// Deterministic shuffled split by fractions; sizes by largest remainder.
pub fn split_dataset(
    dataset: &mut TabularDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(), DataError> {
    let (tr, dv, te) = fractions;
    if tr <= 0.0 || dv <= 0.0 || te <= 0.0 {
        return Err(DataError::Config("split fractions must be positive".into()));
    }
    if (tr + dv + te - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "split fractions must sum to 1, got {}",
            tr + dv + te
        )));
    }
    let n = dataset.n_rows();
    let exact = [tr * n as f64, dv * n as f64, te * n as f64];
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap()
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    split_dataset_counts(dataset, (sizes[0], sizes[1], sizes[2]), seed)
}

/// Split with explicit per-split row counts (used to mirror published split
/// sizes that are not derivable from a single fraction triple).
pub fn split_dataset_counts(
    dataset: &mut TabularDataset,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<(), DataError> {
    let (tr, dv, te) = counts;
    let n = dataset.n_rows();
    if tr + dv + te != n {
        return Err(DataError::Config(format!(
            "split counts {tr}+{dv}+{te} != {n} rows"
        )));
    }
    if tr == 0 || dv == 0 || te == 0 {
        return Err(DataError::Config("every split must be non-empty".into()));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut tags = vec![Split::Train; n];
    for &i in &indices[tr..tr + dv] {
        tags[i] = Split::Dev;
    }
    for &i in &indices[tr + dv..] {
        tags[i] = Split::Test;
    }
    dataset.splits = Some(tags);
    Ok(())
}

/// Expansion of one original column into a contiguous node index range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnExpansion {
    pub column: usize,
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub kind: ColumnKind,
    /// Vocabulary for categorical columns, in first-appearance order over the
    /// training split.
    pub vocabulary: Vec<String>,
    /// Training-split min/max/mean for numeric columns.
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preprocessor {
    pub expansions: Vec<ColumnExpansion>,
    pub n_nodes: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TransformReport {
    pub unseen_categories: Vec<String>,
    pub imputed_missing: usize,
    pub clamped: usize,
}

impl Preprocessor {
    /// Expanded node names, e.g. `age` or `color=red`.
    pub fn node_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_nodes);
        for e in &self.expansions {
            match e.kind {
                ColumnKind::Numeric => names.push(e.name.clone()),
                ColumnKind::Categorical => {
                    for v in &e.vocabulary {
                        names.push(format!("{}={}", e.name, v));
                    }
                }
                ColumnKind::Target => unreachable!(),
            }
        }
        names
    }
}

/// Fits min-max scaling and one-hot vocabularies on the training split only.
pub fn fit_preprocessor(dataset: &TabularDataset) -> Result<Preprocessor, DataError> {
    let train = match &dataset.splits {
        Some(_) => dataset.indices_of(Split::Train),
        None => (0..dataset.n_rows()).collect(),
    };
    if train.is_empty() {
        return Err(DataError::Config("training split is empty".into()));
    }
    let mut expansions = Vec::new();
    let mut start = 0;
    for (c, col) in dataset.schema.feature_columns() {
        match col.kind {
            ColumnKind::Numeric => {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                let mut sum = 0.0;
                let mut count = 0usize;
                for &r in &train {
                    if let Cell::Number(v) = dataset.rows[r][c] {
                        min = min.min(v);
                        max = max.max(v);
                        sum += v;
                        count += 1;
                    }
                }
                let (min, max, mean) = if count == 0 {
                    (0.0, 0.0, 0.0)
                } else {
                    (min, max, sum / count as f64)
                };
                expansions.push(ColumnExpansion {
                    column: c,
                    name: col.name.clone(),
                    start,
                    len: 1,
                    kind: ColumnKind::Numeric,
                    vocabulary: Vec::new(),
                    min,
                    max,
                    mean,
                });
                start += 1;
            }
            ColumnKind::Categorical => {
                let mut vocab: Vec<String> = Vec::new();
                let mut seen: HashSet<&str> = HashSet::new();
                for &r in &train {
                    if let Cell::Text(v) = &dataset.rows[r][c] {
                        if seen.insert(v.as_str()) {
                            vocab.push(v.clone());
                        }
                    }
                }
                if vocab.is_empty() {
                    return Err(DataError::Schema(format!(
                        "categorical column '{}' has no observed training values",
                        col.name
                    )));
                }
                let len = vocab.len();
                expansions.push(ColumnExpansion {
                    column: c,
                    name: col.name.clone(),
                    start,
                    len,
                    kind: ColumnKind::Categorical,
                    vocabulary: vocab,
                    min: 0.0,
                    max: 0.0,
                    mean: 0.0,
                });
                start += len;
            }
            ColumnKind::Target => unreachable!(),
        }
    }
    Ok(Preprocessor {
        expansions,
        n_nodes: start,
    })
}

/// Maps raw rows to the node-value matrix (row-major, `rows.len() x n_nodes`),
/// all values in [0,1].
pub fn transform(
    prep: &Preprocessor,
    rows: &[&Vec<Cell>],
) -> (Vec<f64>, TransformReport) {
    let n = prep.n_nodes;
    let mut out = vec![0.0; rows.len() * n];
    let mut report = TransformReport::default();
    for (ri, row) in rows.iter().enumerate() {
        for e in &prep.expansions {
            match e.kind {
                ColumnKind::Numeric => {
                    let raw = match row[e.column] {
                        Cell::Number(v) => v,
                        _ => {
                            report.imputed_missing += 1;
                            e.mean
                        }
                    };
                    let scaled = if e.max > e.min {
                        (raw - e.min) / (e.max - e.min)
                    } else {
                        0.0 // degenerate range: constant feature carries nothing
                    };
                    let clamped = scaled.clamp(0.0, 1.0);
                    if clamped != scaled {
                        report.clamped += 1;
                    }
                    out[ri * n + e.start] = clamped;
                }
                ColumnKind::Categorical => {
                    match &row[e.column] {
                        Cell::Text(v) => match e.vocabulary.iter().position(|w| w == v) {
                            Some(idx) => out[ri * n + e.start + idx] = 1.0,
                            None => report
                                .unseen_categories
                                .push(format!("{}={}", e.name, v)),
                        },
                        // missing categorical: all-zero indicator block
                        _ => report.imputed_missing += 1,
                    }
                }
                ColumnKind::Target => unreachable!(),
            }
        }
    }
    (out, report)
}

/// Random oversampling of the minority class for binary tasks: returns row
/// indices (into `labels`) containing every original index plus minority
/// duplicates drawn with replacement until class counts are equal.
/// Multi-class label sets are returned unchanged.
pub fn oversample_minority(labels: &[usize], seed: u64) -> Result<Vec<usize>, DataError> {
    let distinct: HashSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(DataError::ClassCoverage(
            "oversampling needs both classes present".into(),
        ));
    }
    if distinct.len() > 2 {
        return Ok((0..labels.len()).collect());
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    let (minority, deficit) = if ones < zeros {
        (1, zeros - ones)
    } else {
        (0, ones - zeros)
    };
    let minority_rows: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == minority)
        .map(|(i, _)| i)
        .collect();
    let mut out: Vec<usize> = (0..labels.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..deficit {
        out.push(minority_rows[rng.gen_range(0..minority_rows.len())]);
    }
    Ok(out)
}
