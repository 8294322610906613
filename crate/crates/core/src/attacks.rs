//! Adversarial input generation against a trained [`Classifier`].
//!
//! All attacks work in raw pixel space `[0, 1]`; the model's frozen input
//! normalization sits inside its forward pass. Samples are attacked in
//! fixed-size chunks; every per-sample quantity (losses, gradients, random
//! starts) is independent of the chunking, so results do not depend on how
//! the work is scheduled.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Reduction, Tape};
use crate::nn::{argmax_rows, Classifier, NnError};
use crate::seed;
use crate::tensor::{Tensor, TensorError};

const CHUNK: usize = 50;
/// `tanh(W_LIMIT) < 1` in `f64`, so C&W iterates stay strictly inside `(0, 1)`.
const W_LIMIT: f64 = 15.0;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("epsilon must be finite and non-negative, got {0}")]
    Epsilon(f64),
    #[error("step size must be positive, got {0}")]
    StepSize(f64),
    #[error("iteration count must be at least 1")]
    Iterations,
    #[error("C&W constant must be positive, got {0}")]
    CwConstant(f64),
    #[error("unknown attack kind `{0}`")]
    UnknownKind(String),
    #[error("{0} labels for {1} images")]
    LabelCount(usize, usize),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    IterLl,
    Cw,
    Semantic,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Fgsm,
        AttackKind::Bim,
        AttackKind::Pgd,
        AttackKind::IterLl,
        AttackKind::Cw,
        AttackKind::Semantic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::IterLl => "iterll",
            AttackKind::Cw => "cw",
            AttackKind::Semantic => "semantic",
        }
    }

    /// Whether outputs must stay inside the L-infinity ball of radius epsilon.
    pub fn is_norm_bounded(self) -> bool {
        !matches!(self, AttackKind::Cw | AttackKind::Semantic)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;
    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AttackError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub cw_c: f64,
    pub cw_iterations: usize,
    pub cw_lr: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: 0.01,
            iterations: 10,
            cw_c: 1.0,
            cw_iterations: 200,
            cw_lr: 0.5,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        check_iterative(self.step_size, self.iterations)?;
        if !(self.cw_c > 0.0 && self.cw_c.is_finite()) {
            return Err(AttackError::CwConstant(self.cw_c));
        }
        check_iterative(self.cw_lr, self.cw_iterations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub images: Tensor,
    /// Prediction moved off the true label (or onto the target for IterLL).
    pub success: Vec<bool>,
    pub linf: Vec<f64>,
    pub l2: Vec<f64>,
    /// Per-sample target class for targeted attacks.
    pub targets: Option<Vec<usize>>,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

/// Per-sample L-infinity and L2 distances between two image batches.
pub fn perturbation_norms(clean: &Tensor, adv: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = clean.shape()[0];
    let per = clean.len() / n;
    clean
        .data()
        .chunks(per)
        .zip(adv.data().chunks(per))
        .map(|(a, b)| {
            let (mut linf, mut sq) = (0.0f64, 0.0);
            for (x, y) in a.iter().zip(b) {
                let d = (y - x).abs();
                linf = linf.max(d);
                sq += d * d;
            }
            (linf, sq.sqrt())
        })
        .unzip()
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps.is_finite() && eps >= 0.0 {
        Ok(())
    } else {
        Err(AttackError::Epsilon(eps))
    }
}

fn check_iterative(alpha: f64, steps: usize) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AttackError::StepSize(alpha));
    }
    if steps == 0 {
        return Err(AttackError::Iterations);
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `v` onto `[x0 - eps, x0 + eps] ∩ [0, 1]` so that
/// `|result - x0| <= eps` holds exactly in floating point.
pub fn project(v: f64, x0: f64, eps: f64) -> f64 {
    let lo = (x0 - eps).max(0.0);
    let hi = (x0 + eps).min(1.0);
    let mut p = v.clamp(lo, hi);
    while (p - x0).abs() > eps {
        p = if p > x0 { p.next_down() } else { p.next_up() };
    }
    p
}

/// Runs `f` over fixed-size chunks of `(images, labels)` in parallel and
/// stitches the per-chunk image outputs back together in order.
fn chunked<F>(images: &Tensor, labels: &[usize], f: F) -> Result<Tensor>
where
    F: Fn(usize, Tensor, &[usize]) -> Result<Tensor> + Sync,
{
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(AttackError::LabelCount(labels.len(), n));
    }
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let len = CHUNK.min(n - start);
            f(start, images.slice_outer(start, len)?, &labels[start..start + len])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat_outer(&parts)?)
}

fn ce_grad(model: &Classifier, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (_, g) = model.input_gradient(x, |tape, logits| tape.cross_entropy(logits, labels, Reduction::Sum))?;
    Ok(g)
}

/// Iterated signed-gradient steps with projection. `direction` is +1 to
/// ascend the loss on `labels`, -1 to descend it.
fn iterate_sign(
    model: &Classifier,
    clean: &Tensor,
    start: Tensor,
    labels: &[usize],
    eps: f64,
    alpha: f64,
    steps: usize,
    direction: f64,
) -> Result<Tensor> {
    let mut x = start;
    for _ in 0..steps {
        let g = ce_grad(model, &x, labels)?;
        for ((xv, gv), &x0) in x.data_mut().iter_mut().zip(g.data()).zip(clean.data()) {
            *xv = project(*xv + direction * alpha * sign(*gv), x0, eps);
        }
    }
    Ok(x)
}

fn untargeted_result(model: &Classifier, clean: &Tensor, adv: Tensor, labels: &[usize]) -> Result<AttackResult> {
    let pred = model.predict(&adv)?;
    let (linf, l2) = perturbation_norms(clean, &adv);
    Ok(AttackResult {
        success: pred.iter().zip(labels).map(|(p, l)| p != l).collect(),
        images: adv,
        linf,
        l2,
        targets: None,
    })
}

/// `x' = clip(x + eps * sign(grad_x CE(f(x), y)), 0, 1)`.
pub fn fgsm(model: &Classifier, x: &Tensor, y: &[usize], eps: f64) -> Result<AttackResult> {
    check_epsilon(eps)?;
    let adv = chunked(x, y, |_, xc, yc| {
        let g = ce_grad(model, &xc, yc)?;
        let mut out = xc;
        for (v, gv) in out.data_mut().iter_mut().zip(g.data()) {
            *v = project(*v + eps * sign(*gv), *v, eps);
        }
        Ok(out)
    })?;
    untargeted_result(model, x, adv, y)
}

/// Basic iterative method: `steps` signed steps of size `alpha`, each
/// projected onto the epsilon ball around `x` and onto `[0, 1]`.
pub fn bim(model: &Classifier, x: &Tensor, y: &[usize], eps: f64, alpha: f64, steps: usize) -> Result<AttackResult> {
    check_epsilon(eps)?;
    check_iterative(alpha, steps)?;
    let adv = chunked(x, y, |_, xc, yc| iterate_sign(model, &xc, xc.clone(), yc, eps, alpha, steps, 1.0))?;
    untargeted_result(model, x, adv, y)
}

/// Uniform random start inside the epsilon ball (projected onto `[0, 1]`).
/// Sample `i` draws from `seed::per_sample(seed, i)`.
pub fn random_start(x: &Tensor, eps: f64, seed: u64, first_index: usize) -> Tensor {
    let n = x.shape()[0];
    let per = x.len() / n;
    let mut out = x.clone();
    for (i, row) in out.data_mut().chunks_mut(per).enumerate() {
        let mut rng = seed::rng(seed::per_sample(seed, first_index + i));
        for v in row {
            let delta = if eps > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
            *v = project(*v + delta, *v, eps);
        }
    }
    out
}

/// BIM from a uniform random start in the epsilon ball.
pub fn pgd(
    model: &Classifier,
    x: &Tensor,
    y: &[usize],
    eps: f64,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Result<AttackResult> {
    check_epsilon(eps)?;
    check_iterative(alpha, steps)?;
    let adv = chunked(x, y, |first, xc, yc| {
        let start = random_start(&xc, eps, seed, first);
        iterate_sign(model, &xc, start, yc, eps, alpha, steps, 1.0)
    })?;
    untargeted_result(model, x, adv, y)
}

/// Least-likely class of each row: the argmin of the clean logits.
pub fn least_likely(model: &Classifier, x: &Tensor) -> Result<Vec<usize>> {
    let logits = model.logits(x)?;
    let neg = logits.map(|v| -v);
    Ok(argmax_rows(&neg))
}

/// Iterative least-likely class: signed descent of CE toward the class the
/// clean model finds least likely.
pub fn iterll(model: &Classifier, x: &Tensor, eps: f64, alpha: f64, steps: usize) -> Result<AttackResult> {
    check_epsilon(eps)?;
    check_iterative(alpha, steps)?;
    let targets = least_likely(model, x)?;
    let adv = chunked(x, &targets, |_, xc, tc| {
        iterate_sign(model, &xc, xc.clone(), tc, eps, alpha, steps, -1.0)
    })?;
    let pred = model.predict(&adv)?;
    let (linf, l2) = perturbation_norms(x, &adv);
    Ok(AttackResult {
        success: pred.iter().zip(&targets).map(|(p, t)| p == t).collect(),
        images: adv,
        linf,
        l2,
        targets: Some(targets),
    })
}

/// Simplified Carlini-Wagner L2: fixed `c`, `kappa = 0`, plain gradient
/// descent in tanh space, `x' = (tanh(w) + 1) / 2`, minimizing
/// `||x' - x||^2 + c * max(Z_y - max_{j != y} Z_j, 0)`.
///
/// Returns the lowest-L2 misclassified iterate per sample; samples never
/// misclassified keep their final iterate and are flagged unsuccessful.
/// Samples the model already misclassifies succeed at zero perturbation.
pub fn cw_l2(
    model: &Classifier,
    x: &Tensor,
    y: &[usize],
    c: f64,
    iterations: usize,
    lr: f64,
) -> Result<AttackResult> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(AttackError::CwConstant(c));
    }
    check_iterative(lr, iterations)?;
    let n_classes = model.classes();
    let n = x.shape()[0];
    let per = x.len() / n;
    let outcome = chunked(x, y, |_, xc, yc| {
        let b = yc.len();
        let clean_pred = model.predict(&xc)?;
        let mut best = xc.clone();
        let mut best_l2 = vec![f64::INFINITY; b];
        for (i, (&p, &l)) in clean_pred.iter().zip(yc).enumerate() {
            if p != l {
                best_l2[i] = 0.0;
            }
        }
        let mut w = xc.map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0).atanh().clamp(-W_LIMIT, W_LIMIT));
        for _ in 0..iterations {
            let mut tape = Tape::new();
            let wn = tape.leaf(w.clone(), true);
            let t = tape.tanh(wn)?;
            let half = tape.scale(t, 0.5)?;
            let offset = tape.leaf(Tensor::full(xc.shape(), 0.5), false);
            let xadv = tape.add(half, offset)?;
            let nodes = model.record(&mut tape, xadv, false)?;
            let z = tape.value(nodes.logits)?.clone();
            let xv = tape.value(xadv)?.clone();
            // Record successes at the current iterate before stepping.
            let pred = argmax_rows(&z);
            for i in 0..b {
                if best_l2[i] == 0.0 || pred[i] == yc[i] {
                    continue;
                }
                let sq: f64 = xv.data()[i * per..(i + 1) * per]
                    .iter()
                    .zip(&xc.data()[i * per..(i + 1) * per])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if sq.sqrt() < best_l2[i] {
                    best_l2[i] = sq.sqrt();
                    best.data_mut()[i * per..(i + 1) * per].copy_from_slice(&xv.data()[i * per..(i + 1) * per]);
                }
            }
            // Hinge subgradient as a constant logit mask.
            let mut mask = vec![0.0; b * n_classes];
            for i in 0..b {
                let row = &z.data()[i * n_classes..(i + 1) * n_classes];
                let mut other = usize::MAX;
                for (j, &v) in row.iter().enumerate() {
                    if j != yc[i] && (other == usize::MAX || v > row[other]) {
                        other = j;
                    }
                }
                if row[yc[i]] - row[other] > 0.0 {
                    mask[i * n_classes + yc[i]] = c;
                    mask[i * n_classes + other] = -c;
                }
            }
            let mask = tape.leaf(Tensor::new(vec![b, n_classes], mask)?, false);
            let hinge = tape.mul(nodes.logits, mask)?;
            let hinge = tape.sum(hinge)?;
            let clean = tape.leaf(xc.clone(), false);
            let diff = tape.sub(xadv, clean)?;
            let sq = tape.mul(diff, diff)?;
            let dist = tape.sum(sq)?;
            let loss = tape.add(dist, hinge)?;
            let g = tape.grad_wrt_input(loss, wn)?;
            for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                *wv = (*wv - lr * gv).clamp(-W_LIMIT, W_LIMIT);
            }
        }
        // Final iterate after the last step.
        let final_x = w.map(|v| (v.tanh() + 1.0) / 2.0);
        let final_pred = model.predict(&final_x)?;
        for i in 0..b {
            let range = i * per..(i + 1) * per;
            if best_l2[i] == 0.0 {
                continue;
            }
            let sq: f64 = final_x.data()[range.clone()]
                .iter()
                .zip(&xc.data()[range.clone()])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if final_pred[i] != yc[i] && sq.sqrt() < best_l2[i] {
                best_l2[i] = sq.sqrt();
                best.data_mut()[range.clone()].copy_from_slice(&final_x.data()[range.clone()]);
            }
            if best_l2[i].is_infinite() {
                best.data_mut()[range.clone()].copy_from_slice(&final_x.data()[range]);
            }
        }
        Ok(best)
    })?;
    untargeted_result(model, x, outcome, y)
}

/// Pixel negation `1 - x`.
pub fn negate(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 - v)
}

/// Semantic attack: the negated image; success when the prediction leaves `y`.
pub fn semantic(model: &Classifier, x: &Tensor, y: &[usize]) -> Result<AttackResult> {
    if y.len() != x.shape()[0] {
        return Err(AttackError::LabelCount(y.len(), x.shape()[0]));
    }
    untargeted_result(model, x, negate(x), y)
}

/// Dispatches one attack kind with the budgets in `cfg`.
pub fn run(model: &Classifier, kind: AttackKind, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    match kind {
        AttackKind::Fgsm => fgsm(model, x, y, cfg.epsilon),
        AttackKind::Bim => bim(model, x, y, cfg.epsilon, cfg.step_size, cfg.iterations),
        AttackKind::Pgd => pgd(model, x, y, cfg.epsilon, cfg.step_size, cfg.iterations, cfg.seed),
        AttackKind::IterLl => iterll(model, x, cfg.epsilon, cfg.step_size, cfg.iterations),
        AttackKind::Cw => cw_l2(model, x, y, cfg.cw_c, cfg.cw_iterations, cfg.cw_lr),
        AttackKind::Semantic => semantic(model, x, y),
    }
}

/// Checks the output invariants: pixels in `[0, 1]` and, for norm-bounded
/// kinds, L-infinity distance at most `eps` for every sample.
pub fn verify(kind: AttackKind, clean: &Tensor, adv: &Tensor, eps: f64) -> std::result::Result<(), String> {
    if clean.shape() != adv.shape() {
        return Err(format!("shape {:?} != {:?}", adv.shape(), clean.shape()));
    }
    if let Some(v) = adv.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(format!("{kind}: pixel {v} outside [0, 1]"));
    }
    if kind.is_norm_bounded() {
        let (linf, _) = perturbation_norms(clean, adv);
        if let Some((i, d)) = linf.iter().enumerate().find(|(_, &d)| d > eps) {
            return Err(format!("{kind}: sample {i} has L-inf distance {d} > {eps}"));
        }
    }
    Ok(())
}
