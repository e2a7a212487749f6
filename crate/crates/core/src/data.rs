//! Labeled name datasets: CSV ingestion, fixed label sets and seeded
//! train/test splitting.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Labels that are dropped from voter-file style data because they carry too
/// few examples to learn from.
pub const DROPPED_CATEGORIES: [&str; 3] = ["unknown", "other", "multiracial"];

pub const DEFAULT_TEST_FRACTION: f64 = 0.1;
pub const DEFAULT_SPLIT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("column `{column}` not found in header of {path}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("no usable rows in {path} (skipped_label={skipped_label} skipped_empty={skipped_empty})")]
    ZeroRows {
        path: PathBuf,
        skipped_label: usize,
        skipped_empty: usize,
    },
    #[error("label `{label}` (line {line}) is not part of label set `{set}`")]
    ForeignLabel {
        label: String,
        line: u64,
        set: String,
    },
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    FractionOutOfRange(f64),
    #[error("cannot split {n} records with test fraction {fraction}: one side would be empty")]
    TooFewRecords { n: usize, fraction: f64 },
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("label id {label_id} out of range for {n_classes} classes")]
    LabelOutOfRange { label_id: usize, n_classes: usize },
}

/// One labeled example.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NameRecord {
    pub first_name: String,
    pub last_name: String,
    pub label_id: usize,
}

impl NameRecord {
    /// Builds a record, trimming both name parts. Returns `None` when either
    /// part is blank.
    pub fn new(first_name: &str, last_name: &str, label_id: usize) -> Option<Self> {
        let first = first_name.trim();
        let last = last_name.trim();
        if first.is_empty() || last.is_empty() {
            return None;
        }
        Some(Self {
            first_name: first.to_string(),
            last_name: last.to_string(),
            label_id,
        })
    }
}

/// An ordered set of class labels for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    name: String,
    classes: Vec<String>,
}

impl LabelSet {
    /// The five census race categories, ordered by frequency in the Florida
    /// voter file.
    pub fn race5() -> Self {
        Self {
            name: "race5".to_string(),
            classes: ["nh_white", "hispanic", "nh_black", "api", "aian"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    /// The thirteen Wikipedia ethnicity categories, ordered by frequency.
    pub fn ethnicity13() -> Self {
        Self {
            name: "ethnicity13".to_string(),
            classes: [
                "GreaterEuropean,British",
                "GreaterEuropean,WestEuropean,French",
                "GreaterEuropean,WestEuropean,Italian",
                "GreaterEuropean,WestEuropean,Hispanic",
                "GreaterEuropean,Jewish",
                "GreaterEuropean,EastEuropean",
                "Asian,IndianSubContinent",
                "Asian,GreaterEastAsian,Japanese",
                "GreaterAfrican,Muslim",
                "Asian,GreaterEastAsian,EastAsian",
                "GreaterEuropean,WestEuropean,Nordic",
                "GreaterEuropean,WestEuropean,Germanic",
                "GreaterAfrican,Africans",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    pub fn custom<S: AsRef<str>>(name: &str, classes: &[S]) -> Result<Self, DataError> {
        if classes.len() < 2 {
            return Err(DataError::InvalidLabelSet(
                "at least two classes are required".into(),
            ));
        }
        let mut seen = HashMap::new();
        let mut out = Vec::with_capacity(classes.len());
        for class in classes {
            let class = class.as_ref().trim();
            if class.is_empty() {
                return Err(DataError::InvalidLabelSet("empty class label".into()));
            }
            if seen.insert(class.to_lowercase(), ()).is_some() {
                return Err(DataError::InvalidLabelSet(format!(
                    "duplicate class label `{class}`"
                )));
            }
            out.push(class.to_string());
        }
        Ok(Self {
            name: name.to_string(),
            classes: out,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(String::as_str)
    }

    /// Case-insensitive lookup after trimming.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let needle = label.trim().to_lowercase();
        self.classes.iter().position(|c| c.to_lowercase() == needle)
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.name, self.classes.join(" | "))
    }
}

/// Names of the first-name, last-name and label columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub first: String,
    pub last: String,
    pub label: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            first: "first_name".to_string(),
            last: "last_name".to_string(),
            label: "label".to_string(),
        }
    }
}

/// What to do with a label that is not in the label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelPolicy {
    /// Count and skip any foreign label.
    #[default]
    SkipForeign,
    /// Skip only [`DROPPED_CATEGORIES`]; any other foreign label is an error.
    Strict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipCounts {
    pub parsed: usize,
    pub skipped_label: usize,
    pub skipped_empty: usize,
}

impl SkipCounts {
    pub fn total_rows(&self) -> usize {
        self.parsed + self.skipped_label + self.skipped_empty
    }
}

impl fmt::Display for SkipCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "skipped_label={} skipped_empty={}",
            self.skipped_label, self.skipped_empty
        )
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<NameRecord>,
    pub counts: SkipCounts,
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn column_index(
    headers: &csv::StringRecord,
    column: &str,
    path: &Path,
) -> Result<usize, DataError> {
    headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| DataError::MissingColumn {
            path: path.to_path_buf(),
            column: column.to_string(),
        })
}

pub fn load_labeled_csv(
    path: &Path,
    label_set: &LabelSet,
    columns: &ColumnMap,
) -> Result<LoadedDataset, DataError> {
    load_labeled_csv_with(path, label_set, columns, LabelPolicy::SkipForeign)
}

/// Reads a header-first UTF-8 CSV. Rows with a blank name part or a label
/// outside `label_set` are counted and skipped.
pub fn load_labeled_csv_with(
    path: &Path,
    label_set: &LabelSet,
    columns: &ColumnMap,
    policy: LabelPolicy,
) -> Result<LoadedDataset, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let first_idx = column_index(&headers, &columns.first, path)?;
    let last_idx = column_index(&headers, &columns.last, path)?;
    let label_idx = column_index(&headers, &columns.label, path)?;

    let mut counts = SkipCounts::default();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let raw_label = field(label_idx);
        let Some(label_id) = label_set.index_of(raw_label) else {
            let normalized = raw_label.trim().to_lowercase();
            if policy == LabelPolicy::Strict
                && !DROPPED_CATEGORIES.contains(&normalized.as_str())
            {
                return Err(DataError::ForeignLabel {
                    label: raw_label.trim().to_string(),
                    line: row.position().map(|p| p.line()).unwrap_or(0),
                    set: label_set.name().to_string(),
                });
            }
            counts.skipped_label += 1;
            continue;
        };
        match NameRecord::new(field(first_idx), field(last_idx), label_id) {
            Some(record) => {
                records.push(record);
                counts.parsed += 1;
            }
            None => counts.skipped_empty += 1,
        }
    }

    if records.is_empty() {
        return Err(DataError::ZeroRows {
            path: path.to_path_buf(),
            skipped_label: counts.skipped_label,
            skipped_empty: counts.skipped_empty,
        });
    }
    Ok(LoadedDataset { records, counts })
}

/// Reads only the two name columns, for unlabeled pretraining corpora.
pub fn load_names_csv(
    path: &Path,
    first_column: &str,
    last_column: &str,
) -> Result<(Vec<(String, String)>, SkipCounts), DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let first_idx = column_index(&headers, first_column, path)?;
    let last_idx = column_index(&headers, last_column, path)?;
    let mut counts = SkipCounts::default();
    let mut names = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let first = row.get(first_idx).unwrap_or("").trim();
        let last = row.get(last_idx).unwrap_or("").trim();
        if first.is_empty() || last.is_empty() {
            counts.skipped_empty += 1;
            continue;
        }
        counts.parsed += 1;
        names.push((first.to_string(), last.to_string()));
    }
    if names.is_empty() {
        return Err(DataError::ZeroRows {
            path: path.to_path_buf(),
            skipped_label: 0,
            skipped_empty: counts.skipped_empty,
        });
    }
    Ok((names, counts))
}

/// Per-class counts in label-set order.
pub fn class_counts(records: &[NameRecord], label_set: &LabelSet) -> Vec<usize> {
    let mut counts = vec![0; label_set.len()];
    for r in records {
        counts[r.label_id] += 1;
    }
    counts
}

pub fn validate_labels(records: &[NameRecord], n_classes: usize) -> Result<(), DataError> {
    match records.iter().find(|r| r.label_id >= n_classes) {
        Some(r) => Err(DataError::LabelOutOfRange {
            label_id: r.label_id,
            n_classes,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<NameRecord>,
    pub test: Vec<NameRecord>,
    pub seed: u64,
    pub test_fraction: f64,
}

/// Shuffles with a seeded ChaCha stream and takes the first
/// `round(test_fraction * n)` records as the test side.
pub fn split_train_test(
    records: &[NameRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::FractionOutOfRange(test_fraction));
    }
    let n = records.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n < 2 || n_test == 0 || n_test >= n {
        return Err(DataError::TooFewRecords {
            n,
            fraction: test_fraction,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test = order[..n_test].iter().map(|&i| records[i].clone()).collect();
    let train = order[n_test..].iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit {
        train,
        test,
        seed,
        test_fraction,
    })
}
