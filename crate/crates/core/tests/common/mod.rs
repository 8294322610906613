#![allow(dead_code)]

use gradgate::autodiff::{NodeId, Tape};
use gradgate::nn::{ArchSpec, Classifier, Normalization, TrainConfig};
use gradgate::tensor::Tensor;
use gradgate::{data, seed, Dataset};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a small absolute floor so that coordinates with
/// vanishing gradients compare on absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between analytic gradients and central
/// differences of `build` over `coords` random coordinates per input.
/// Returns `(max error, coordinates checked)`.
pub fn gradcheck(
    inputs: &[Tensor],
    coords: usize,
    seed: u64,
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> (f64, usize) {
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let root = build(&mut tape, &ids);
        tape.value(root).unwrap().item().unwrap()
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root).unwrap();

    let mut rng = seed::rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(ids[k]).unwrap();
        assert_eq!(g.shape(), input.shape());
        for _ in 0..coords.min(input.len()) {
            let j = rng.gen_range(0..input.len());
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Reduces any node to a scalar through a fixed random weighting, so every
/// output coordinate contributes a distinct amount to the gradient.
pub fn weighted_sum(tape: &mut Tape, node: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(node).unwrap().shape().to_vec();
    let w = tape.leaf(random_tensor(&shape, -1.0, 1.0, seed), false);
    let m = tape.mul(node, w).unwrap();
    tape.sum(m).unwrap()
}

/// Worst FD error of a loss of the logits with respect to a classifier's
/// parameters, `coords` random coordinates per parameter set.
pub fn classifier_gradcheck(
    model: &Classifier,
    batch: &Tensor,
    coords: usize,
    seed: u64,
    loss: impl Fn(&mut Tape, NodeId) -> NodeId,
) -> (f64, usize) {
    let eval = |m: &Classifier| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let fwd = m.record(&mut tape, x, false).unwrap();
        let root = loss(&mut tape, fwd.logits);
        tape.value(root).unwrap().item().unwrap()
    };
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone(), false);
    let fwd = model.record(&mut tape, x, true).unwrap();
    let root = loss(&mut tape, fwd.logits);
    let grads = tape.backward(root).unwrap();

    let mut rng = seed::rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, &id) in fwd.params.iter().enumerate() {
        let g = grads.get(id).unwrap();
        let n = model.params[k].tensor.len();
        for _ in 0..coords.min(n) {
            let j = rng.gen_range(0..n);
            let mut plus = model.clone();
            plus.params[k].tensor.data_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            minus.params[k].tensor.data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn glyph_split(train: usize, test: usize, seed: u64) -> (Dataset, Dataset, Dataset) {
    (
        data::gen_glyphs(train, seed::derive(seed, "train")).unwrap(),
        data::gen_glyphs(train / 4, seed::derive(seed, "val")).unwrap(),
        data::gen_glyphs(test, seed::derive(seed, "test")).unwrap(),
    )
}

/// SmallCNN trained on glyphs with the given schedule.
pub fn trained_small_cnn(train: &Dataset, val: &Dataset, cfg: &TrainConfig, init_seed: u64) -> Classifier {
    let mut model = Classifier::build(ArchSpec::small_cnn([1, 16, 16], 10), init_seed).unwrap();
    model.norm = Normalization::fit(&train.images);
    gradgate::nn::train_classifier(model, train, val, cfg).unwrap().0
}

/// O(n^2) pairwise AUROC with half credit for ties.
pub fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

/// Average precision by sweeping every distinct score as a threshold.
pub fn aupr_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && !l).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}
