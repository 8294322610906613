//! Threshold-free and thresholded detection metrics plus the report type.
//!
//! Anomalous samples are the positive class throughout; a higher score
//! means "more anomalous".

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("empty input")]
    Empty,
}

type Result<T> = std::result::Result<T, MetricError>;

/// One scored sample; the unit of metric computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample_id: usize,
    /// 1 anomalous, 0 normal.
    pub anomaly_label: u8,
    pub score: f64,
    pub source_tag: String,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    Ok((positives, labels.len() - positives))
}

/// Indices ordered by descending score, ties in index order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks,
/// which equals trapezoidal integration of the empirical ROC curve.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (positives, negatives) = check(scores, labels)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Area under the precision-recall curve as average precision: the
/// step-wise sum of `(R_k - R_{k-1}) * P_k` over distinct thresholds in
/// descending order.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (positives, negatives) = check(scores, labels)?;
    if positives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Fraction of samples where `score >= threshold` agrees with the label.
pub fn detection_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Accuracy, AUROC and AUPR of one scored set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auroc: f64,
    pub aupr: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn evaluate(scored: &[ScoredSample], threshold: f64) -> Result<Metrics> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.anomaly_label == 1).collect();
    Ok(Metrics {
        accuracy: detection_accuracy(&scores, &labels, threshold)?,
        auroc: auroc(&scores, &labels)?,
        aupr: aupr(&scores, &labels)?,
    })
}

/// One row of a report: an anomaly source scored by one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub source: String,
    pub method: String,
    pub metrics: Metrics,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_digest: String,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self {
            config_digest: config_digest.into(),
            rows: Vec::new(),
        }
    }

    pub fn get(&self, source: &str, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.source == source && r.method == method)
    }

    /// Machine-readable `key=value` lines. Floats use the shortest
    /// round-trip representation.
    pub fn to_kv(&self) -> String {
        let mut out = format!("config_digest={}\nrows={}\n", self.config_digest, self.rows.len());
        for r in &self.rows {
            let p = format!("{}.{}", r.source, r.method);
            let _ = writeln!(out, "{p}.accuracy={:?}", r.metrics.accuracy);
            let _ = writeln!(out, "{p}.auroc={:?}", r.metrics.auroc);
            let _ = writeln!(out, "{p}.aupr={:?}", r.metrics.aupr);
            let _ = writeln!(out, "{p}.n_normal={}", r.n_normal);
            let _ = writeln!(out, "{p}.n_anomalous={}", r.n_anomalous);
        }
        out
    }

    /// Aligned human-readable table, metrics in percent.
    pub fn to_table(&self) -> String {
        let sw = self.rows.iter().map(|r| r.source.len()).max().unwrap_or(0).max(6);
        let mw = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<sw$}  {:<mw$}  {:>8}  {:>8}  {:>8}  {:>6}  {:>6}\n",
            "source", "method", "acc", "auroc", "aupr", "normal", "anom"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<sw$}  {:<mw$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>6}  {:>6}",
                r.source,
                r.method,
                100.0 * r.metrics.accuracy,
                100.0 * r.metrics.auroc,
                100.0 * r.metrics.aupr,
                r.n_normal,
                r.n_anomalous
            );
        }
        out
    }
}
