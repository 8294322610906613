//! Binary anomaly detector over feature vectors and the max-softmax baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::{split_indices, DataError};
use crate::gradfeat::FeatureTable;
use crate::metrics::{self, MetricError, ScoredSample};
use crate::nn::{Classifier, NnError};
use crate::seed;
use crate::tensor::{Tensor, TensorError};

pub const SPLIT_FRACTIONS: [f64; 3] = [0.4, 0.4, 0.2];

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("{0} side of the detection set is empty")]
    EmptySide(&'static str),
    #[error("feature dimension {got} does not match expected {expected}")]
    Dim { got: usize, expected: usize },
    #[error("non-finite detector loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error(transparent)]
    Split(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] NnError),
}

type Result<T> = std::result::Result<T, DetectorError>;

/// Labeled feature rows of one split part.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub values: Vec<Vec<f64>>,
    /// 1 anomalous, 0 normal.
    pub labels: Vec<u8>,
    pub sample_ids: Vec<usize>,
    pub source_tags: Vec<String>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    fn push(&mut self, row: Vec<f64>, label: u8, id: usize, tag: &str) {
        self.values.push(row);
        self.labels.push(label);
        self.sample_ids.push(id);
        self.source_tags.push(tag.to_string());
    }

    pub fn bool_labels(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == 1).collect()
    }
}

/// Splits each side 40/40/20 on its own seeded permutation and merges the
/// parts (normal rows first). Sample ids are row positions within each side.
pub fn assemble_detection_sets(
    normal: &FeatureTable,
    anomalous: &FeatureTable,
    seed: u64,
) -> Result<[DetectionSet; 3]> {
    if normal.is_empty() {
        return Err(DetectorError::EmptySide("normal"));
    }
    if anomalous.is_empty() {
        return Err(DetectorError::EmptySide("anomalous"));
    }
    if normal.dim() != anomalous.dim() {
        return Err(DetectorError::Dim {
            got: anomalous.dim(),
            expected: normal.dim(),
        });
    }
    let mut parts: [DetectionSet; 3] = Default::default();
    for (table, label, stream) in [(normal, 0u8, "normal"), (anomalous, 1u8, "anomalous")] {
        let strata = vec![0i64; table.len()];
        let split = split_indices(&strata, &SPLIT_FRACTIONS, seed::derive(seed, stream))?;
        for (part, idx) in parts.iter_mut().zip(split) {
            for i in idx {
                part.push(table.values[i].clone(), label, i, &table.source_tag);
            }
        }
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(DetectorError::Config("hidden, batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(DetectorError::Config("learning_rate > 0 and momentum in [0, 1) required".into()));
        }
        Ok(())
    }
}

/// Two-layer perceptron `P -> H (ReLU) -> 1 (sigmoid)` with frozen
/// train-split standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorMlp {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[w1 [P,H], b1 [H], w2 [H,1], b2 [1]]`.
    pub params: Vec<Tensor>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
}

impl DetectorMlp {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let p = self.dim();
        let mut data = Vec::with_capacity(rows.len() * p);
        for r in rows {
            if r.len() != p {
                return Err(DetectorError::Dim { got: r.len(), expected: p });
            }
            data.extend(r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
        }
        Ok(Tensor::new(vec![rows.len(), p], data)?)
    }

    /// Logit graph on already standardized input.
    fn record(&self, tape: &mut Tape, x: Tensor, params: &[crate::autodiff::NodeId]) -> Result<crate::autodiff::NodeId> {
        let x = tape.leaf(x, false);
        let h = tape.matmul(x, params[0])?;
        let h = tape.add_bias(h, params[1])?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, params[2])?;
        Ok(tape.add_bias(z, params[3])?)
    }

    fn logits_standardized(&self, x: Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ids: Vec<_> = self.params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let z = self.record(&mut tape, x, &ids)?;
        Ok(tape.value(z)?.data().to_vec())
    }

    /// Sigmoid outputs in `(0, 1)`; higher means more anomalous.
    pub fn score(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.logits_standardized(self.standardize(rows)?)?;
        Ok(z.into_iter().map(sigmoid).collect())
    }

    pub fn score_set(&self, set: &DetectionSet) -> Result<Vec<ScoredSample>> {
        let scores = self.score(&set.values)?;
        Ok(scores
            .into_iter()
            .enumerate()
            .map(|(i, score)| ScoredSample {
                sample_id: set.sample_ids[i],
                anomaly_label: set.labels[i],
                score,
                source_tag: set.source_tags[i].clone(),
            })
            .collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn fit_standardization(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let p = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; p];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).unwrap()
}

/// Minibatch SGD with momentum on BCE. Keeps the parameters of the epoch
/// with the best validation AUROC (earliest on ties) and stops after
/// `patience` epochs without improvement.
pub fn train_detector(train: &DetectionSet, val: &DetectionSet, cfg: &DetectorConfig) -> Result<DetectorMlp> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DetectorError::EmptySide(if train.is_empty() { "train" } else { "validation" }));
    }
    let p = train.values[0].len();
    for r in train.values.iter().chain(&val.values) {
        if r.len() != p {
            return Err(DetectorError::Dim { got: r.len(), expected: p });
        }
    }
    let (mean, std) = fit_standardization(&train.values);
    let mut rng = seed::rng(cfg.seed);
    let h = cfg.hidden;
    let params = vec![
        uniform(&mut rng, &[p, h], (6.0 / p as f64).sqrt()),
        uniform(&mut rng, &[h], 1.0 / (p as f64).sqrt()),
        uniform(&mut rng, &[h, 1], (6.0 / h as f64).sqrt()),
        uniform(&mut rng, &[1], 1.0 / (h as f64).sqrt()),
    ];
    let mut model = DetectorMlp {
        mean,
        std,
        params,
        best_epoch: 0,
        best_val_auroc: f64::NEG_INFINITY,
    };
    let x_train = model.standardize(&train.values)?;
    let x_val = model.standardize(&val.values)?;
    let val_labels = val.bool_labels();
    let targets: Vec<f64> = train.labels.iter().map(|&l| l as f64).collect();
    let mut velocity: Vec<Vec<f64>> = model.params.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut best = model.params.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x_train.select_outer(batch)?;
            let tb: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let ids: Vec<_> = model
                .params
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(format!("p{i}"), t.clone()))
                .collect();
            let z = model.record(&mut tape, xb, &ids)?;
            let loss = tape.bce_with_logits(z, &tb)?;
            if !tape.value(loss)?.item().is_some_and(f64::is_finite) {
                return Err(DetectorError::NonFiniteLoss(epoch));
            }
            let grads = tape.backward(loss)?;
            for ((param, vel), id) in model.params.iter_mut().zip(&mut velocity).zip(&ids) {
                let Some(g) = grads.get(*id) else { continue };
                for ((w, v), gv) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + gv;
                    *w -= cfg.learning_rate * *v;
                }
            }
        }
        let val_scores = model.logits_standardized(x_val.clone())?;
        let a = metrics::auroc(&val_scores, &val_labels)?;
        if a > model.best_val_auroc {
            model.best_val_auroc = a;
            model.best_epoch = epoch;
            best = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params = best;
    Ok(model)
}

/// Max-softmax baseline: `1 - max_i softmax(z)_i` per sample.
pub fn msp_scores(model: &Classifier, batch: &Tensor) -> Result<Vec<f64>> {
    let logits = model.logits(batch)?;
    Ok(msp_from_logits(&logits))
}

pub fn msp_from_logits(logits: &Tensor) -> Vec<f64> {
    let n = logits.shape()[0];
    let c = logits.len() / n.max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|z| (z - m).exp()).sum();
            1.0 - 1.0 / denom
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: Vec<Vec<f64>>, tag: &str, label: i8) -> FeatureTable {
        FeatureTable::new(tag, label, rows)
    }

    fn synthetic(n: usize, seed: u64, separable: bool) -> (FeatureTable, FeatureTable) {
        let mut rng = seed::rng(seed);
        let mut side = |shift: f64| {
            (0..n)
                .map(|_| {
                    let mut r: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    r[0] += shift;
                    r
                })
                .collect::<Vec<_>>()
        };
        let a = side(0.0);
        let b = side(if separable { 5.0 } else { 0.0 });
        (table(a, "clean", 0), table(b, "anom", 1))
    }

    #[test]
    fn split_sizes_and_partition() {
        let (n, a) = synthetic(100, 1, true);
        let [tr, va, te] = assemble_detection_sets(&n, &a, 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 80, 40));
        for part in [&tr, &va, &te] {
            assert_eq!(part.positives() * 2, part.len());
        }
        let mut ids: Vec<(u8, usize)> = [&tr, &va, &te]
            .iter()
            .flat_map(|p| p.labels.iter().cloned().zip(p.sample_ids.iter().cloned()))
            .collect();
        ids.sort();
        let expect: Vec<(u8, usize)> = (0..2u8).flat_map(|l| (0..100).map(move |i| (l, i))).collect();
        assert_eq!(ids, expect);
    }

    #[test]
    fn empty_side_is_an_error() {
        let (n, _) = synthetic(10, 1, true);
        let empty = table(vec![], "x", 1);
        assert!(matches!(
            assemble_detection_sets(&n, &empty, 0),
            Err(DetectorError::EmptySide("anomalous"))
        ));
    }

    #[test]
    fn separable_feature_gives_perfect_val_auroc() {
        let (n, a) = synthetic(100, 2, true);
        let [tr, va, _] = assemble_detection_sets(&n, &a, 1).unwrap();
        let d = train_detector(&tr, &va, &DetectorConfig::default()).unwrap();
        assert_eq!(d.best_val_auroc, 1.0);
        let s = d.score(&va.values).unwrap();
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn training_is_deterministic() {
        let (n, a) = synthetic(60, 3, true);
        let [tr, va, _] = assemble_detection_sets(&n, &a, 1).unwrap();
        let cfg = DetectorConfig { seed: 9, ..Default::default() };
        assert_eq!(train_detector(&tr, &va, &cfg).unwrap(), train_detector(&tr, &va, &cfg).unwrap());
    }

    #[test]
    fn standardization_uses_train_stats() {
        let (n, a) = synthetic(50, 4, true);
        let [tr, va, _] = assemble_detection_sets(&n, &a, 1).unwrap();
        let d = train_detector(&tr, &va, &DetectorConfig::default()).unwrap();
        let x = d.standardize(&tr.values[..3]).unwrap();
        let manual = d.logits_standardized(x).unwrap();
        let via_score = d.score(&tr.values[..3]).unwrap();
        for (z, s) in manual.iter().zip(&via_score) {
            assert_eq!(sigmoid(*z), *s);
        }
        assert!(matches!(d.score(&[vec![1.0]]), Err(DetectorError::Dim { .. })));
    }

    #[test]
    fn constant_feature_is_not_divided_by_zero() {
        let (mean, std) = fit_standardization(&[vec![2.0, 1.0], vec![2.0, 3.0]]);
        assert_eq!(mean, vec![2.0, 2.0]);
        assert_eq!(std, vec![1.0, 1.0]);
    }

    #[test]
    fn msp_reference_values() {
        let uniform = Tensor::new(vec![1, 4], vec![0.3; 4]).unwrap();
        assert!((msp_from_logits(&uniform)[0] - 0.75).abs() < 1e-15);
        let peaked = Tensor::new(vec![1, 3], vec![800.0, 0.0, 0.0]).unwrap();
        assert_eq!(msp_from_logits(&peaked)[0], 0.0);
        let z = Tensor::new(vec![1, 3], vec![0.2, -1.0, 1.5]).unwrap();
        let shifted = z.map(|v| v + 100.0);
        assert!((msp_from_logits(&z)[0] - msp_from_logits(&shifted)[0]).abs() < 1e-15);
    }
}
