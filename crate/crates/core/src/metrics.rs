//! Confusion matrix, macro and weighted F1, and the iterative
//! preference-bias score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    Empty,
    #[error("label {label} out of range for {n} classes")]
    Label { label: usize, n: usize },
    #[error("preference iteration produced a non-finite value for class {0}")]
    NonFinite(usize),
    #[error("{0}")]
    Shape(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Floor for a preference denominator, so a class that never occurs as
/// ground truth cannot divide by zero.
pub const PREFERENCE_EPS: f64 = 1e-12;
pub const PREFERENCE_ITERATIONS: usize = 20;

/// `w[i][j]` counts predictions of class `i` whose ground truth is `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub w: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            w: vec![vec![0; n]; n],
        }
    }

    pub fn from_rows(w: Vec<Vec<u64>>) -> Result<Self> {
        let n = w.len();
        if w.iter().any(|r| r.len() != n) {
            return Err(MetricsError::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { w })
    }

    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = Self::new(n);
        for (pred, truth) in pairs {
            cm.record(pred, truth)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, pred: usize, truth: usize) -> Result<()> {
        let n = self.n();
        for label in [pred, truth] {
            if label >= n {
                return Err(MetricsError::Label { label, n });
            }
        }
        self.w[pred][truth] += 1;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn total(&self) -> u64 {
        self.w.iter().flatten().sum()
    }

    /// Number of predictions per class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.w.iter().map(|r| r.iter().sum()).collect()
    }

    /// Ground-truth count per class.
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.n()).map(|j| self.w.iter().map(|r| r[j]).sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.n()).map(|i| self.w[i][i]).sum::<u64>() as f64 / t as f64
    }

    /// Rows are predictions, columns ground truth; with `normalize`, each
    /// column is divided by its ground-truth count.
    pub fn to_csv(&self, labels: &[String], normalize: bool) -> String {
        let cols = self.col_sums();
        let mut out = String::from("predicted\\truth");
        for l in labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (i, row) in self.w.iter().enumerate() {
            out.push_str(&csv_field(labels.get(i).map(String::as_str).unwrap_or("?")));
            for (j, &v) in row.iter().enumerate() {
                if normalize {
                    let x = if cols[j] == 0 { 0.0 } else { v as f64 / cols[j] as f64 };
                    let _ = write!(out, ",{x}");
                } else {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassScores>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class precision, recall and F1 with their macro and support-weighted
/// means. Empty rows or columns contribute zero.
pub fn f1_scores(cm: &ConfusionMatrix) -> Result<F1Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let per_class: Vec<ClassScores> = (0..cm.n())
        .map(|i| {
            let precision = ratio(cm.w[i][i], rows[i]);
            let recall = ratio(cm.w[i][i], cols[i]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: cols[i],
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / cm.n() as f64;
    let weighted_f1 =
        per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64;
    Ok(F1Scores {
        macro_f1,
        weighted_f1,
        per_class,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divisor `n`.
    #[default]
    Population,
    /// Divisor `n - 1`.
    Sample,
}

pub fn std_dev(xs: &[f64], kind: StdKind) -> f64 {
    let n = xs.len();
    let div = match kind {
        StdKind::Population => n,
        StdKind::Sample => n.saturating_sub(1),
    };
    if div == 0 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / div as f64).sqrt()
}

/// Synchronous preference iteration from `p = 1`:
/// `p_i <- sum_j w_ij p_j / (p_i + p_j)  /  sum_j w_ji / (p_i + p_j)`.
/// Returns the standard deviation of the final preferences and the
/// preferences themselves.
pub fn preference_bias(
    cm: &ConfusionMatrix,
    iterations: usize,
    kind: StdKind,
) -> Result<(f64, Vec<f64>)> {
    let n = cm.n();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let w: Vec<Vec<f64>> = cm.w.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let mut p = vec![1.0; n];
    let mut next = vec![0.0; n];
    for _ in 0..iterations {
        for i in 0..n {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..n {
                // zero counts contribute nothing, even when p_i = p_j = 0
                let s = p[i] + p[j];
                if s == 0.0 {
                    continue;
                }
                if w[i][j] != 0.0 {
                    num += w[i][j] * p[j] / s;
                }
                if w[j][i] != 0.0 {
                    den += w[j][i] / s;
                }
            }
            let v = num / den.max(PREFERENCE_EPS);
            if !v.is_finite() {
                return Err(MetricsError::NonFinite(i));
            }
            next[i] = v;
        }
        std::mem::swap(&mut p, &mut next);
    }
    Ok((std_dev(&p, kind), p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub bias: f64,
    pub preferences: Vec<f64>,
    pub per_class: Vec<ClassScores>,
    /// Auxiliary only; not a selection metric.
    pub accuracy: f64,
    pub n_samples: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix, labels: Vec<String>, kind: StdKind) -> Result<Self> {
        if labels.len() != cm.n() {
            return Err(MetricsError::Shape(format!(
                "{} labels for {} classes",
                labels.len(),
                cm.n()
            )));
        }
        let f1 = f1_scores(&cm)?;
        let (bias, preferences) = preference_bias(&cm, PREFERENCE_ITERATIONS, kind)?;
        Ok(Self {
            labels,
            macro_f1: f1.macro_f1,
            weighted_f1: f1.weighted_f1,
            per_class: f1.per_class,
            bias,
            preferences,
            accuracy: cm.accuracy(),
            n_samples: cm.total(),
            confusion: cm,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn confusion_csv(&self, normalize: bool) -> String {
        self.confusion.to_csv(&self.labels, normalize)
    }
}
