//! One-vs-rest confusion counts and the metrics derived from them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: String,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub total: u64,
    pub classes: Vec<ClassCounts>,
}

impl ConfusionMatrix {
    pub fn get(&self, class: &str) -> Option<&Counts> {
        self.classes.iter().find(|c| c.class == class).map(|c| &c.counts)
    }
}

/// Counts per class, classes in sorted order.
pub fn confusion(predictions: &[String], truths: &[String], classes: &BTreeSet<String>) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if let Some(l) = predictions.iter().chain(truths).find(|l| !classes.contains(*l)) {
        return Err(Error::invalid(format!("label {l:?} is not a known class")));
    }
    let total = truths.len() as u64;
    let classes = classes
        .iter()
        .map(|c| {
            let mut k = Counts::default();
            for (p, t) in predictions.iter().zip(truths) {
                match (p == c, t == c) {
                    (true, true) => k.tp += 1,
                    (true, false) => k.fp += 1,
                    (false, true) => k.fn_ += 1,
                    (false, false) => k.tn += 1,
                }
            }
            ClassCounts {
                class: c.clone(),
                counts: k,
            }
        })
        .collect();
    Ok(ConfusionMatrix { total, classes })
}

pub const METRIC_NAMES: [&str; 9] = [
    "accuracy",
    "precision",
    "recall",
    "specificity",
    "f1",
    "tpr",
    "fpr",
    "tnr",
    "fnr",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub tnr: f64,
    pub fnr: f64,
}

impl Metrics {
    pub fn values(&self) -> [f64; 9] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.specificity,
            self.f1,
            self.tpr,
            self.fpr,
            self.tnr,
            self.fnr,
        ]
    }

    fn from_values(v: [f64; 9]) -> Self {
        Self {
            accuracy: v[0],
            precision: v[1],
            recall: v[2],
            specificity: v[3],
            f1: v[4],
            tpr: v[5],
            fpr: v[6],
            tnr: v[7],
            fnr: v[8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub values: Metrics,
    /// Names of metrics whose denominator was zero; their value is 0.
    pub undefined: Vec<String>,
}

impl MetricSet {
    pub fn is_undefined(&self, name: &str) -> bool {
        self.undefined.iter().any(|u| u == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: MetricSet,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(k: &Counts) -> MetricSet {
    let n = k.tp + k.tn + k.fp + k.fn_;
    let precision = ratio(k.tp, k.tp + k.fp);
    let recall = ratio(k.tp, k.tp + k.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let tnr = ratio(k.tn, k.tn + k.fp);
    let raw = [
        ratio(k.tp + k.tn, n),
        precision,
        recall,
        tnr,
        f1,
        recall,
        ratio(k.fp, k.fp + k.tn),
        tnr,
        ratio(k.fn_, k.fn_ + k.tp),
    ];
    let undefined = METRIC_NAMES
        .iter()
        .zip(&raw)
        .filter(|(_, v)| v.is_none())
        .map(|(n, _)| n.to_string())
        .collect();
    MetricSet {
        values: Metrics::from_values(raw.map(|v| v.unwrap_or(0.0))),
        undefined,
    }
}

/// Per-class metrics and their unweighted mean. A metric is flagged
/// undefined in the average if it was undefined for any class.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = cm
        .classes
        .iter()
        .map(|c| ClassMetrics {
            class: c.class.clone(),
            metrics: class_metrics(&c.counts),
        })
        .collect();
    let mut sums = [0.0; 9];
    for c in &per_class {
        for (s, v) in sums.iter_mut().zip(c.metrics.values.values()) {
            *s += v;
        }
    }
    let n = per_class.len();
    let means = sums.map(|s| if n == 0 { 0.0 } else { s / n as f64 });
    let undefined = METRIC_NAMES
        .iter()
        .filter(|name| n == 0 || per_class.iter().any(|c| c.metrics.is_undefined(name)))
        .map(|s| s.to_string())
        .collect();
    MetricsReport {
        per_class,
        macro_avg: MetricSet {
            values: Metrics::from_values(means),
            undefined,
        },
    }
}
