//! Confusion counts, per-class precision/recall/f1 and the comparison table
//! against a baseline.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::data::{LabelSet, NameRecord};
use crate::model::{Checkpoint, ModelError};
use crate::train::{encode_records, predict_classes, TrainError};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "NMC_THREADS";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("confusion matrix is not square: row {row} has {len} entries, expected {expected}")]
    NonSquare { row: usize, len: usize, expected: usize },
    #[error("{what}: report has {report} classes, other side has {other}")]
    ClassMismatch {
        what: &'static str,
        report: usize,
        other: usize,
    },
    #[error("baseline class `{0}` is not part of the report")]
    UnknownClass(String),
    #[error("baseline f1 for `{0}` is 0; relative improvement is undefined")]
    ZeroBaseline(String),
    #[error("model f1 for `{0}` is 0; relative improvement is undefined")]
    ZeroModel(String),
    #[error("label id {label_id} out of range for {n_classes} classes")]
    LabelOutOfRange { label_id: usize, n_classes: usize },
    #[error("predictor returned {got} labels for {expected} records")]
    PredictionCount { got: usize, expected: usize },
    #[error(transparent)]
    Predict(#[from] TrainError),
}

impl From<ModelError> for MetricsError {
    fn from(e: ModelError) -> Self {
        MetricsError::Predict(TrainError::Model(e))
    }
}

/// Anything that maps records to class indices. Implementations must be
/// read-only so evaluation can fan out across threads.
pub trait Predictor: Sync {
    fn n_classes(&self) -> usize;
    fn predict(&self, records: &[NameRecord]) -> Result<Vec<usize>, MetricsError>;
}

impl Predictor for Checkpoint {
    fn n_classes(&self) -> usize {
        self.model.n_classes().unwrap_or(0)
    }

    fn predict(&self, records: &[NameRecord]) -> Result<Vec<usize>, MetricsError> {
        let seqs = encode_records(records, self.scheme, &self.vocab, self.max_len)?;
        Ok(predict_classes(&self.model, &seqs, 256)?)
    }
}

/// `counts[i * k + j]`: true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let k = rows.len();
        let mut m = Self::zeros(k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(MetricsError::NonSquare {
                    row: i,
                    len: row.len(),
                    expected: k,
                });
            }
            m.counts[i * k..(i + 1) * k].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn from_pairs(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self, MetricsError> {
        if truth.len() != predicted.len() {
            return Err(MetricsError::PredictionCount {
                got: predicted.len(),
                expected: truth.len(),
            });
        }
        let mut m = Self::zeros(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if let Some(&bad) = [t, p].iter().find(|&&x| x >= k) {
                return Err(MetricsError::LabelOutOfRange {
                    label_id: bad,
                    n_classes: k,
                });
            }
            m.counts[t * k + p] += 1;
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.k..(i + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn accuracy(&self) -> f64 {
        ratio((0..self.k).map(|c| self.get(c, c)).sum(), self.total())
    }

    /// Elementwise sum; order of merging never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k, "merging confusion matrices of different size");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }
}

/// Worker count from `NMC_THREADS`, else the machine's parallelism.
pub fn evaluation_workers() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn confusion_matrix<P: Predictor + ?Sized>(
    predictor: &P,
    test: &[NameRecord],
) -> Result<ConfusionMatrix, MetricsError> {
    confusion_matrix_with_workers(predictor, test, evaluation_workers())
}

/// Splits `test` into contiguous chunks, classifies them on up to `workers`
/// threads and sums the per-chunk counts.
pub fn confusion_matrix_with_workers<P: Predictor + ?Sized>(
    predictor: &P,
    test: &[NameRecord],
    workers: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let k = predictor.n_classes();
    let chunk = test.len().div_ceil(workers.clamp(1, test.len()));
    let count = |part: &[NameRecord]| -> Result<ConfusionMatrix, MetricsError> {
        let predicted = predictor.predict(part)?;
        let truth: Vec<usize> = part.iter().map(|r| r.label_id).collect();
        ConfusionMatrix::from_pairs(&truth, &predicted, k)
    };
    let parts: Vec<Result<ConfusionMatrix, MetricsError>> = if chunk >= test.len() {
        vec![count(test)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = test.chunks(chunk).map(|part| s.spawn(move || count(part))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut total = ConfusionMatrix::zeros(k);
    for part in parts {
        total.merge(&part?);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub label_set: String,
    pub classes: Vec<ClassMetrics>,
    /// Support-weighted means over every class in `classes`.
    pub weighted: Averages,
    /// Unweighted means over every class in `classes`.
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub total: u64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(m: &ConfusionMatrix, labels: &LabelSet) -> Result<MetricsReport, MetricsError> {
    if labels.len() != m.n_classes() {
        return Err(MetricsError::ClassMismatch {
            what: "label set vs confusion matrix",
            report: m.n_classes(),
            other: labels.len(),
        });
    }
    let classes = (0..m.n_classes())
        .map(|c| {
            let tp = m.get(c, c);
            let precision = ratio(tp, m.col_sum(c));
            let recall = ratio(tp, m.row_sum(c));
            ClassMetrics {
                label: labels.label(c).unwrap_or_default().to_string(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: m.row_sum(c),
            }
        })
        .collect();
    Ok(MetricsReport::from_classes(labels.name(), classes))
}

impl MetricsReport {
    /// Builds a report from per-class values, computing both averages.
    pub fn from_classes(label_set: &str, classes: Vec<ClassMetrics>) -> Self {
        let total: u64 = classes.iter().map(|c| c.support).sum();
        let n = classes.len().max(1) as f64;
        let weighted_mean = |f: fn(&ClassMetrics) -> f64| {
            if total == 0 {
                0.0
            } else {
                classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
            }
        };
        let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / n;
        let weighted = Averages {
            precision: weighted_mean(|c| c.precision),
            recall: weighted_mean(|c| c.recall),
            f1: weighted_mean(|c| c.f1),
        };
        let macro_avg = Averages {
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f1: mean(|c| c.f1),
        };
        Self {
            label_set: label_set.to_string(),
            classes,
            weighted,
            macro_avg,
            total,
        }
    }

    pub fn class(&self, label: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.label.eq_ignore_ascii_case(label))
    }

    /// Plain-text table: one row per class, then the averages, two decimals.
    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.label.len())
            .chain(["Weighted avg".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}",
            "Group", "Precision", "Recall", "f1-score", "Support"
        );
        let row = |out: &mut String, name: &str, p: f64, r: f64, f: f64, s: u64| {
            let _ = writeln!(out, "{name:<width$}  {p:>9.2}  {r:>6.2}  {f:>8.2}  {s:>7}");
        };
        for c in &self.classes {
            row(&mut out, &c.label, c.precision, c.recall, c.f1, c.support);
        }
        let w = self.weighted;
        row(&mut out, "Weighted avg", w.precision, w.recall, w.f1, self.total);
        let m = self.macro_avg;
        row(&mut out, "Macro avg", m.precision, m.recall, m.f1, self.total);
        let names: Vec<&str> = self.classes.iter().map(|c| c.label.as_str()).collect();
        let _ = writeln!(out, "Averages over: {}", names.join(", "));
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Denominator of the relative improvement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovementBasis {
    /// `100 * (f1 - baseline) / baseline`
    #[default]
    Baseline,
    /// `100 * (f1 - baseline) / f1`
    Model,
}

impl ImprovementBasis {
    pub fn percent(self, f1: f64, baseline: f64) -> f64 {
        match self {
            ImprovementBasis::Baseline => 100.0 * (f1 - baseline) / baseline,
            ImprovementBasis::Model => 100.0 * (f1 - baseline) / f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImprovementRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub baseline_f1: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImprovementTable {
    pub basis: ImprovementBasis,
    pub rows: Vec<ImprovementRow>,
    /// Support-weighted over the rows' classes only.
    pub average: ImprovementRow,
}

/// Key accepted in a baseline file for an explicit average row.
pub const AVERAGE_KEY: &str = "average";

/// Compares each class that has a baseline f1. `baseline` may also carry an
/// `average` entry; otherwise the baseline average is weighted by the
/// report's supports over the compared classes.
pub fn improvement_table(
    report: &MetricsReport,
    baseline: &[(String, f64)],
    basis: ImprovementBasis,
) -> Result<ImprovementTable, MetricsError> {
    let mut explicit_average = None;
    let mut pairs = Vec::new();
    for (label, b) in baseline {
        if label.eq_ignore_ascii_case(AVERAGE_KEY) {
            explicit_average = Some(*b);
            continue;
        }
        let class = report
            .class(label)
            .ok_or_else(|| MetricsError::UnknownClass(label.clone()))?;
        pairs.push((class, *b));
    }
    if pairs.is_empty() {
        return Err(MetricsError::ClassMismatch {
            what: "baseline",
            report: report.classes.len(),
            other: 0,
        });
    }
    // keep the report's class order
    pairs.sort_by_key(|(c, _)| report.classes.iter().position(|x| x.label == c.label));

    let make = |label: &str, p: f64, r: f64, f1: f64, b: f64| -> Result<ImprovementRow, MetricsError> {
        if b == 0.0 && basis == ImprovementBasis::Baseline {
            return Err(MetricsError::ZeroBaseline(label.to_string()));
        }
        if f1 == 0.0 && basis == ImprovementBasis::Model {
            return Err(MetricsError::ZeroModel(label.to_string()));
        }
        Ok(ImprovementRow {
            label: label.to_string(),
            precision: p,
            recall: r,
            f1,
            baseline_f1: b,
            improvement: basis.percent(f1, b),
        })
    };
    let rows = pairs
        .iter()
        .map(|(c, b)| make(&c.label, c.precision, c.recall, c.f1, *b))
        .collect::<Result<Vec<_>, _>>()?;

    let support: u64 = pairs.iter().map(|(c, _)| c.support).sum();
    let wmean = |f: &dyn Fn(&ClassMetrics, f64) -> f64| {
        if support == 0 {
            0.0
        } else {
            pairs.iter().map(|(c, b)| f(c, *b) * c.support as f64).sum::<f64>() / support as f64
        }
    };
    let baseline_avg = explicit_average.unwrap_or_else(|| wmean(&|_, b| b));
    let average = make(
        "Average",
        wmean(&|c, _| c.precision),
        wmean(&|c, _| c.recall),
        wmean(&|c, _| c.f1),
        baseline_avg,
    )?;
    Ok(ImprovementTable { basis, rows, average })
}

impl ImprovementTable {
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(["Average".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>6}  {:>8}  {:>11}  {:>13}",
            "Group", "Precision", "Recall", "f1-score", "baseline f1", "% Improvement"
        );
        for r in self.rows.iter().chain([&self.average]) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.2}  {:>6.2}  {:>8.2}  {:>11.2}  {:>13.2}",
                r.label, r.precision, r.recall, r.f1, r.baseline_f1, r.improvement
            );
        }
        let names: Vec<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        let _ = writeln!(out, "Averages over: {}", names.join(", "));
        out
    }
}
