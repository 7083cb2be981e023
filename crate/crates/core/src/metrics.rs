//! Confusion matrices and two-class classification metrics.
//!
//! Conventions, fixed across the whole crate:
//!
//! * A [`ConfusionMatrix`] stores `counts[predicted][actual]` — rows are the
//!   predicted class, columns the actual class, class order (Normal,
//!   Pneumonia).
//! * **Precision** is row-wise (`diag / row sum`), **recall** column-wise
//!   (`diag / column sum`); the macro variants are unweighted means over
//!   classes with a defined value.
//! * **F1** is the harmonic mean of macro precision and macro recall —
//!   not the mean of per-class F1 scores. This is the form that reproduces
//!   the published summary tables this module is checked against.
//!
//! The reference tables these metrics are validated against label their two
//! columns the other way around: their "Precision" equals our column-wise
//! macro and their "Recall" our row-wise macro. Rather than silently
//! redefining standard terms, [`MetricsReport`] exposes the swapped values
//! as explicit `paper_precision`/`paper_recall` aliases and keeps the
//! standard definitions primary.

use std::fmt;

use crate::error::{Error, Result};

/// 2×2 cross-tabulation of predictions: `counts[predicted][actual]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; 2]; 2],
}

/// The two class names, in label order.
pub const CLASS_NAMES: [&str; 2] = ["Normal", "Pneumonia"];

impl ConfusionMatrix {
    pub fn new(counts: [[u64; 2]; 2]) -> ConfusionMatrix {
        ConfusionMatrix { counts }
    }

    pub fn get(&self, predicted: usize, actual: usize) -> u64 {
        self.counts[predicted][actual]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Correctly classified samples (main diagonal).
    pub fn trace(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    /// All samples predicted as class `p`.
    pub fn row_sum(&self, p: usize) -> u64 {
        self.counts[p][0] + self.counts[p][1]
    }

    /// All samples actually of class `a`.
    pub fn col_sum(&self, a: usize) -> u64 {
        self.counts[0][a] + self.counts[1][a]
    }

    /// Predicted and actual axes exchanged.
    pub fn transposed(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: [
                [self.counts[0][0], self.counts[1][0]],
                [self.counts[0][1], self.counts[1][1]],
            ],
        }
    }

    /// Text table mirroring the reference-figure layout: per-cell counts and
    /// share of total, row margins (precision and its complement), column
    /// margins (recall and complement), overall accuracy in the corner.
    /// Percentages at one decimal place.
    pub fn render(&self) -> String {
        let total = self.total();
        let share = |c: u64| {
            if total == 0 { "  n/a".to_string() } else { pct1(c as f64 / total as f64) }
        };
        let margin = |num: u64, den: u64| -> (String, String) {
            if den == 0 {
                ("  n/a".to_string(), "  n/a".to_string())
            } else {
                let v = num as f64 / den as f64;
                (pct1(v), pct1(1.0 - v))
            }
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22}{:>14}{:>14}{:>16}\n",
            "predicted \\ actual", CLASS_NAMES[0], CLASS_NAMES[1], "precision"
        ));
        for (p, name) in CLASS_NAMES.iter().enumerate() {
            let (hit, miss) = margin(self.counts[p][p], self.row_sum(p));
            out.push_str(&format!(
                "{:<22}{:>7} {:>6}{:>7} {:>6}{:>9} {:>6}\n",
                name,
                self.counts[p][0],
                share(self.counts[p][0]),
                self.counts[p][1],
                share(self.counts[p][1]),
                hit,
                miss
            ));
        }
        let (r0, r0c) = margin(self.counts[0][0], self.col_sum(0));
        let (r1, r1c) = margin(self.counts[1][1], self.col_sum(1));
        let (acc, err) = margin(self.trace(), total);
        out.push_str(&format!(
            "{:<22}{:>7} {:>6}{:>7} {:>6}{:>9} {:>6}\n",
            "recall", r0, r0c, r1, r1c, acc, err
        ));
        out
    }
}

/// One decimal place, e.g. `98.7%`.
fn pct1(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

/// Two decimal places, e.g. `98.97%` — the summary-table format.
fn pct2(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

/// Tabulates predictions against ground truth.
pub fn confusion_from_predictions(predicted: &[u8], actual: &[u8]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch { left: predicted.len(), right: actual.len() });
    }
    if predicted.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let mut counts = [[0u64; 2]; 2];
    for (&p, &a) in predicted.iter().zip(actual) {
        if p > 1 {
            return Err(Error::InvalidLabel(u64::from(p)));
        }
        if a > 1 {
            return Err(Error::InvalidLabel(u64::from(a)));
        }
        counts[p as usize][a as usize] += 1;
    }
    Ok(ConfusionMatrix::new(counts))
}

/// Fraction of correctly classified samples.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// A per-class metric value, or a marker that its denominator was empty
/// (e.g. precision of a class that was never predicted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassMetric {
    Value(f64),
    NotApplicable,
}

impl ClassMetric {
    pub fn value(self) -> Option<f64> {
        match self {
            ClassMetric::Value(v) => Some(v),
            ClassMetric::NotApplicable => None,
        }
    }
}

impl fmt::Display for ClassMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassMetric::Value(v) => f.write_str(&pct2(*v)),
            ClassMetric::NotApplicable => f.write_str("n/a"),
        }
    }
}

fn ratio(num: u64, den: u64) -> ClassMetric {
    if den == 0 {
        ClassMetric::NotApplicable
    } else {
        ClassMetric::Value(num as f64 / den as f64)
    }
}

/// Per-class precision: `diag / row sum`, over predictions.
pub fn per_class_precision(cm: &ConfusionMatrix) -> [ClassMetric; 2] {
    [ratio(cm.get(0, 0), cm.row_sum(0)), ratio(cm.get(1, 1), cm.row_sum(1))]
}

/// Per-class recall: `diag / column sum`, over actual classes.
pub fn per_class_recall(cm: &ConfusionMatrix) -> [ClassMetric; 2] {
    [ratio(cm.get(0, 0), cm.col_sum(0)), ratio(cm.get(1, 1), cm.col_sum(1))]
}

/// Mean over the classes where the metric is defined. With a nonzero total
/// at least one row and one column are occupied, so this is never empty.
fn macro_mean(values: &[ClassMetric; 2]) -> f64 {
    let defined: Vec<f64> = values.iter().filter_map(|m| m.value()).collect();
    defined.iter().sum::<f64>() / defined.len() as f64
}

/// The complete metric set for one confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_precision: [ClassMetric; 2],
    pub per_class_recall: [ClassMetric; 2],
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Harmonic mean of `macro_precision` and `macro_recall`.
    pub f1: f64,
}

impl MetricsReport {
    /// The reference tables' "Precision" — our macro recall.
    pub fn paper_precision(&self) -> f64 {
        self.macro_recall
    }

    /// The reference tables' "Recall" — our macro precision.
    pub fn paper_recall(&self) -> f64 {
        self.macro_precision
    }

    /// Stable key-value rendering, percentages at two decimals. Identical
    /// reports render to identical bytes.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("accuracy={}\n", pct2(self.accuracy)));
        for (key, values) in [
            ("precision", &self.per_class_precision),
            ("recall", &self.per_class_recall),
        ] {
            for (class, v) in CLASS_NAMES.iter().zip(values.iter()) {
                out.push_str(&format!("{key}_{}={v}\n", class.to_ascii_lowercase()));
            }
        }
        out.push_str(&format!("macro_precision={}\n", pct2(self.macro_precision)));
        out.push_str(&format!("macro_recall={}\n", pct2(self.macro_recall)));
        out.push_str(&format!("f1={}\n", pct2(self.f1)));
        out.push_str(&format!("paper_precision={}\n", pct2(self.paper_precision())));
        out.push_str(&format!("paper_recall={}\n", pct2(self.paper_recall())));
        out
    }
}

/// Computes every metric of one matrix.
pub fn metrics_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let accuracy = accuracy(cm)?;
    let per_class_precision = per_class_precision(cm);
    let per_class_recall = per_class_recall(cm);
    let macro_precision = macro_mean(&per_class_precision);
    let macro_recall = macro_mean(&per_class_recall);
    // Harmonic mean; the equal-argument branch keeps the symmetric-matrix
    // identity (macroP == macroR == F1) exact rather than off by an ulp.
    let f1 = if macro_precision == macro_recall {
        macro_precision
    } else if macro_precision + macro_recall == 0.0 {
        0.0
    } else {
        2.0 * macro_precision * macro_recall / (macro_precision + macro_recall)
    };
    Ok(MetricsReport {
        accuracy,
        per_class_precision,
        per_class_recall,
        macro_precision,
        macro_recall,
        f1,
    })
}
