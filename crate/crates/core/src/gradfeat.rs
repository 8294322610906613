//! Confounding-label gradient features and the activation-norm baseline.
//!
//! For each input the classifier's logits are scored with a sigmoid BCE
//! against a label the network never saw in training (all ones by default).
//! The squared L2 norm of the loss gradient for every parameter tensor,
//! in canonical order, forms the representation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::nn::{Classifier, NnError};
use crate::seed;
use crate::tensor::{Tensor, TensorError};

const ACTIVATION_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("confounding label needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("k-hot label needs 2 <= k <= {classes}, got k = {k}")]
    BadK { k: usize, classes: usize },
    #[error("unknown confounding label `{0}` (expected all-ones, all-zeros or k-hot:K[:SEED])")]
    UnknownLabel(String),
    #[error("label has {label} entries but the model has {classes} classes")]
    LabelWidth { label: usize, classes: usize },
    #[error("non-finite gradient feature for sample {0}")]
    NonFinite(usize),
    #[error("empty group `{0}`")]
    EmptyGroup(String),
    #[error("{values} feature rows but {tags} group tags")]
    TagCount { values: usize, tags: usize },
    #[error("unknown feature mode `{0}` (expected gradient or activation)")]
    UnknownMode(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Gradient,
    Activation,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Gradient => "gradient",
            FeatureMode::Activation => "activation",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(FeatureMode::Gradient),
            "activation" => Ok(FeatureMode::Activation),
            other => Err(FeatureError::UnknownMode(other.to_string())),
        }
    }
}

/// How the confounding target is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    AllOnes,
    AllZeros,
    KHot { k: usize, seed: u64 },
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelKind::AllOnes => f.write_str("all-ones"),
            LabelKind::AllZeros => f.write_str("all-zeros"),
            LabelKind::KHot { k, seed } => write!(f, "k-hot:{k}:{seed}"),
        }
    }
}

impl FromStr for LabelKind {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || FeatureError::UnknownLabel(s.to_string());
        match s {
            "all-ones" => Ok(LabelKind::AllOnes),
            "all-zeros" => Ok(LabelKind::AllZeros),
            _ => {
                let rest = s.strip_prefix("k-hot:").ok_or_else(bad)?;
                let mut parts = rest.split(':');
                let k = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let seed = match parts.next() {
                    Some(v) => v.parse().map_err(|_| bad())?,
                    None => 0,
                };
                if parts.next().is_some() {
                    return Err(bad());
                }
                Ok(LabelKind::KHot { k, seed })
            }
        }
    }
}

impl Serialize for LabelKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LabelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A multi-hot (or all-zero) target that matches no one-hot class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundingLabel {
    pub values: Vec<f64>,
    pub descriptor: String,
}

impl ConfoundingLabel {
    pub fn new(classes: usize, kind: LabelKind) -> Result<Self> {
        if classes < 2 {
            return Err(FeatureError::TooFewClasses(classes));
        }
        let values = match kind {
            LabelKind::AllOnes => vec![1.0; classes],
            LabelKind::AllZeros => vec![0.0; classes],
            LabelKind::KHot { k, seed } => {
                if k < 2 || k > classes {
                    return Err(FeatureError::BadK { k, classes });
                }
                let mut v = vec![0.0; classes];
                for i in index::sample(&mut seed::rng(seed), classes, k) {
                    v[i] = 1.0;
                }
                v
            }
        };
        Ok(Self {
            values,
            descriptor: kind.to_string(),
        })
    }

    pub fn all_ones(classes: usize) -> Result<Self> {
        Self::new(classes, LabelKind::AllOnes)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean sigmoid BCE of one logit row against the confounding target, in
/// the conventional non-negative orientation. Finite for any finite logits.
pub fn bce_confounding_loss(logits: &[f64], label: &ConfoundingLabel) -> Result<f64> {
    if logits.len() != label.values.len() {
        return Err(FeatureError::LabelWidth {
            label: label.values.len(),
            classes: logits.len(),
        });
    }
    let total: f64 = logits
        .iter()
        .zip(&label.values)
        .map(|(&z, &t)| t * softplus(-z) + (1.0 - t) * softplus(z))
        .sum();
    Ok(total / logits.len() as f64)
}

/// Per-sample feature vectors of one source; row `i` is sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub source_tag: String,
    /// 0 normal, 1 anomalous, -1 unlabeled.
    pub anomaly_label: i8,
    pub values: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(source_tag: impl Into<String>, anomaly_label: i8, values: Vec<Vec<f64>>) -> Self {
        Self {
            source_tag: source_tag.into(),
            anomaly_label,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Column `j` across all rows.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }
}

/// Squared gradient norm of `scale * J` for every parameter tensor, one
/// sample at a time. `scale` exists for the sign and scaling properties;
/// the method itself uses `1.0`.
pub fn gradient_features_scaled(
    model: &Classifier,
    batch: &Tensor,
    label: &ConfoundingLabel,
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    if label.values.len() != model.classes() {
        return Err(FeatureError::LabelWidth {
            label: label.values.len(),
            classes: model.classes(),
        });
    }
    let n = batch.shape().first().copied().unwrap_or(0);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let x = batch.slice_outer(i, 1)?;
            let mut tape = Tape::new();
            let input = tape.leaf(x, false);
            let nodes = model.record(&mut tape, input, true)?;
            let mut loss = tape.bce_with_logits(nodes.logits, &label.values)?;
            if scale != 1.0 {
                loss = tape.scale(loss, scale)?;
            }
            let grads = tape.backward(loss)?;
            let row: Vec<f64> = nodes
                .params
                .iter()
                .map(|&p| grads.get(p).map_or(0.0, Tensor::sq_norm))
                .collect();
            if row.iter().all(|v| v.is_finite()) {
                Ok(row)
            } else {
                Err(FeatureError::NonFinite(i))
            }
        })
        .collect()
}

/// Gradient representation of every sample in `batch`.
pub fn extract_gradient_features(
    model: &Classifier,
    batch: &Tensor,
    label: &ConfoundingLabel,
) -> Result<Vec<Vec<f64>>> {
    gradient_features_scaled(model, batch, label, 1.0)
}

/// L2 norm of each layer's output, per sample.
pub fn extract_activation_features(model: &Classifier, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let starts: Vec<usize> = (0..n).step_by(ACTIVATION_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let len = ACTIVATION_CHUNK.min(n - start);
            let (_, acts) = model.forward_with_activations(&batch.slice_outer(start, len)?)?;
            let rows = (0..len)
                .map(|i| {
                    acts.iter()
                        .map(|a| {
                            let per = a.len() / len;
                            a.data()[i * per..(i + 1) * per].iter().map(|v| v * v).sum::<f64>().sqrt()
                        })
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>();
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Five-number summary of one feature column within one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linearly interpolated quantile of sorted data (the common "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            min: s[0],
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q3: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

/// Per-tag, per-column quartiles. Result maps tag to one summary per column.
pub fn norm_summary(rows: &[Vec<f64>], tags: &[String]) -> Result<BTreeMap<String, Vec<Quartiles>>> {
    if rows.len() != tags.len() {
        return Err(FeatureError::TagCount {
            values: rows.len(),
            tags: tags.len(),
        });
    }
    let mut groups: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    for (row, tag) in rows.iter().zip(tags) {
        groups.entry(tag.clone()).or_default().push(row);
    }
    if groups.is_empty() {
        return Err(FeatureError::EmptyGroup(String::new()));
    }
    groups
        .into_iter()
        .map(|(tag, members)| {
            let dim = members[0].len();
            let cols = (0..dim)
                .map(|j| {
                    let col: Vec<f64> = members.iter().map(|r| r[j]).collect();
                    Quartiles::of(&col).ok_or_else(|| FeatureError::EmptyGroup(tag.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((tag, cols))
        })
        .collect()
}
