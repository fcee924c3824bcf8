//! Binary classification metrics over {Normal, Pneumonia}: confusion
//! matrix, per-class precision/recall/F1, macro and support-weighted
//! averages, F-beta and ROC AUC.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("labels ({labels}) and predictions ({predictions}) differ in length")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("no samples")]
    Empty,
    #[error("AUC is undefined unless both classes are present")]
    SingleClass,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Normal = 0,
    Pneumonia = 1,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Normal, Class::Pneumonia];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        match i {
            0 => Some(Class::Normal),
            1 => Some(Class::Pneumonia),
            _ => None,
        }
    }

    pub fn other(self) -> Class {
        match self {
            Class::Normal => Class::Pneumonia,
            Class::Pneumonia => Class::Normal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "Normal",
            Class::Pneumonia => "Pneumonia",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Class {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "0" | "normal" | "n" => Ok(Class::Normal),
            "1" | "pneumonia" | "p" => Ok(Class::Pneumonia),
            other => Err(format!("unknown class {other:?}")),
        }
    }
}

/// Counts indexed `[actual][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, actual: Class, predicted: Class) -> u64 {
        self.counts[actual.index()][predicted.index()]
    }

    pub fn support(&self, class: Class) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    pub fn predicted(&self, class: Class) -> u64 {
        self.counts[0][class.index()] + self.counts[1][class.index()]
    }
}

pub fn confusion(labels: &[Class], predictions: &[Class]) -> Result<ConfusionMatrix, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch { labels: labels.len(), predictions: predictions.len() });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (a, p) in labels.iter().zip(predictions) {
        cm.counts[a.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub normal: ClassMetrics,
    pub pneumonia: ClassMetrics,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn class_metrics(cm: &ConfusionMatrix, class: Class) -> ClassMetrics {
    let tp = cm.get(class, class);
    let (precision, zp) = ratio(tp, cm.predicted(class));
    let (recall, zr) = ratio(tp, cm.support(class));
    ClassMetrics { precision, recall, f1: f_beta(precision, recall, 1.0), support: cm.support(class), zero_division: zp || zr }
}

pub fn report(cm: &ConfusionMatrix) -> Result<ClassificationReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let normal = class_metrics(cm, Class::Normal);
    let pneumonia = class_metrics(cm, Class::Pneumonia);
    let accuracy = (cm.counts[0][0] + cm.counts[1][1]) as f64 / total as f64;
    let macro_avg = Averages {
        precision: (normal.precision + pneumonia.precision) / 2.0,
        recall: (normal.recall + pneumonia.recall) / 2.0,
        f1: (normal.f1 + pneumonia.f1) / 2.0,
    };
    let (wn, wp) = (normal.support as f64 / total as f64, pneumonia.support as f64 / total as f64);
    let weighted_avg = Averages {
        precision: wn * normal.precision + wp * pneumonia.precision,
        recall: wn * normal.recall + wp * pneumonia.recall,
        f1: wn * normal.f1 + wp * pneumonia.f1,
    };
    Ok(ClassificationReport { normal, pneumonia, accuracy, macro_avg, weighted_avg, total })
}

/// `(1 + b^2) P R / (b^2 P + R)`, or 0 when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

/// Area under the ROC curve by the trapezoidal rule over distinct score
/// thresholds. Tied scores form one step of the curve, which is the same as
/// giving tied positive/negative pairs half credit.
pub fn roc_auc(scores: &[f64], labels: &[Class]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { labels: labels.len(), predictions: scores.len() });
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(bad));
    }
    let pos = labels.iter().filter(|&&l| l == Class::Pneumonia).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == Class::Pneumonia {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / pos, fp / neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Percent with no decimals, the display convention for reports.
fn pct(v: f64) -> String {
    format!("{:.0}", v * 100.0)
}

impl ClassificationReport {
    pub fn class(&self, class: Class) -> &ClassMetrics {
        match class {
            Class::Normal => &self.normal,
            Class::Pneumonia => &self.pneumonia,
        }
    }

    /// Aligned plain-text table: per-class rows, accuracy, macro and
    /// weighted averages.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14}{:>10}{:>8}{:>10}{:>9}\n", "", "precision", "recall", "f1-score", "support"));
        for class in Class::ALL {
            let m = self.class(class);
            out.push_str(&format!(
                "{:<14}{:>10}{:>8}{:>10}{:>9}\n",
                class.name(),
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                m.support
            ));
        }
        out.push('\n');
        out.push_str(&format!("{:<14}{:>10}{:>8}{:>10}{:>9}\n", "accuracy", "", "", pct(self.accuracy), self.total));
        for (name, avg) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            out.push_str(&format!(
                "{:<14}{:>10}{:>8}{:>10}{:>9}\n",
                name,
                pct(avg.precision),
                pct(avg.recall),
                pct(avg.f1),
                self.total
            ));
        }
        out
    }

    /// `key=value` lines at full precision.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        for class in Class::ALL {
            let m = self.class(class);
            let k = class.name().to_ascii_lowercase();
            out.push_str(&format!("{k}.precision={}\n", m.precision));
            out.push_str(&format!("{k}.recall={}\n", m.recall));
            out.push_str(&format!("{k}.f1={}\n", m.f1));
            out.push_str(&format!("{k}.support={}\n", m.support));
            out.push_str(&format!("{k}.zero_division={}\n", m.zero_division));
        }
        out.push_str(&format!("accuracy={}\n", self.accuracy));
        for (k, avg) in [("macro_avg", &self.macro_avg), ("weighted_avg", &self.weighted_avg)] {
            out.push_str(&format!("{k}.precision={}\n{k}.recall={}\n{k}.f1={}\n", avg.precision, avg.recall, avg.f1));
        }
        out.push_str(&format!("total={}\n", self.total));
        out
    }
}
