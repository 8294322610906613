//! Small convolutional and fully-connected classifiers built on the tape.
//!
//! A "layer" here is one parametric block: a convolution (with optional
//! ReLU and max-pool) or a dense map (with optional ReLU). Each layer owns
//! exactly two parameter sets, `layer{i}.weight` and `layer{i}.bias`, and
//! contributes one activation tensor, the block output.

use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Conv2dAttrs, NodeId, Reduction, Tape};
use crate::container::{Container, ContainerError, CHECKPOINT_MAGIC};
use crate::data::{DataError, Dataset};
use crate::seed;
use crate::tensor::{Tensor, TensorError};

/// Samples per inference graph when a batch is evaluated in pieces.
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: {reason}")]
    Arch { layer: usize, reason: String },
    #[error("input batch shape {got:?} does not match model input [B, {expected:?}]")]
    InputShape { got: Vec<usize>, expected: [usize; 3] },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Data(#[from] DataError),
}

type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: usize,
        activation: Activation,
        pool: Option<usize>,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
}

/// Architecture: input `[C, H, W]`, layer sequence and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy)]
enum Flow {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Flow {
    fn width(self) -> usize {
        match self {
            Flow::Spatial(c, h, w) => c * h * w,
            Flow::Flat(n) => n,
        }
    }
}

impl ArchSpec {
    /// conv3x3(1->8)+ReLU+pool2, conv3x3(8->16)+ReLU+pool2, dense 64+ReLU, dense N.
    pub fn small_cnn(input: [usize; 3], classes: usize) -> Self {
        let conv = |out_channels| LayerSpec::Conv {
            out_channels,
            kernel: 3,
            padding: 1,
            activation: Activation::Relu,
            pool: Some(2),
        };
        Self {
            input,
            classes,
            layers: vec![
                conv(8),
                conv(16),
                LayerSpec::Dense {
                    units: 64,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: classes,
                    activation: Activation::Identity,
                },
            ],
        }
    }

    /// dense `hidden`+ReLU, dense N.
    pub fn mlp(input: [usize; 3], hidden: usize, classes: usize) -> Self {
        Self {
            input,
            classes,
            layers: vec![
                LayerSpec::Dense {
                    units: hidden,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: classes,
                    activation: Activation::Identity,
                },
            ],
        }
    }

    /// Checks that layers compose and returns each layer's `(weight, bias)` shapes.
    pub fn param_shapes(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(NnError::Arch {
                layer: 0,
                reason: format!("empty input shape {:?}", self.input),
            });
        }
        if self.layers.is_empty() {
            return Err(NnError::Arch {
                layer: 0,
                reason: "no layers".into(),
            });
        }
        let mut flow = Flow::Spatial(c, h, w);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |reason: String| NnError::Arch { layer: i, reason };
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    padding,
                    pool,
                    ..
                } => {
                    let Flow::Spatial(ci, h, w) = flow else {
                        return Err(err("convolution after a flattening dense layer".into()));
                    };
                    if out_channels == 0 || kernel == 0 {
                        return Err(err("zero channels or kernel size".into()));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(err(format!("kernel {kernel} larger than padded {h}x{w} input")));
                    }
                    let (mut ho, mut wo) = (h + 2 * padding - kernel + 1, w + 2 * padding - kernel + 1);
                    if let Some(p) = pool {
                        if p == 0 || p > ho || p > wo {
                            return Err(err(format!("pool {p} does not fit {ho}x{wo}")));
                        }
                        ho /= p;
                        wo /= p;
                    }
                    shapes.push((vec![out_channels, ci, kernel, kernel], vec![out_channels]));
                    flow = Flow::Spatial(out_channels, ho, wo);
                }
                LayerSpec::Dense { units, .. } => {
                    if units == 0 {
                        return Err(err("zero units".into()));
                    }
                    shapes.push((vec![flow.width(), units], vec![units]));
                    flow = Flow::Flat(units);
                }
            }
        }
        let last = self.layers.len() - 1;
        match flow {
            Flow::Flat(n) if n == self.classes => {}
            _ => {
                return Err(NnError::Arch {
                    layer: last,
                    reason: format!("final layer must be dense with {} units", self.classes),
                })
            }
        }
        if self.classes < 2 {
            return Err(NnError::Arch {
                layer: last,
                reason: "need at least two classes".into(),
            });
        }
        Ok(shapes)
    }
}

/// One named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub name: String,
    pub ordinal: usize,
    pub tensor: Tensor,
}

/// Frozen per-channel input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and (population) standard deviation of `[B, C, H, W]` images.
    pub fn fit(images: &Tensor) -> Self {
        let shape = images.shape();
        let (b, c) = (shape[0], shape[1]);
        let inner = images.len() / (b * c);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &v) in images.data().iter().enumerate() {
            let ch = (i / inner) % c;
            mean[ch] += v;
            sq[ch] += v * v;
        }
        let n = (b * inner) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                if var > 1e-12 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }
}

/// Graph nodes produced by [`Classifier::record`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub activations: Vec<NodeId>,
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub arch: ArchSpec,
    pub params: Vec<ParamSet>,
    pub norm: Normalization,
    pub seed: u64,
    pub val_accuracy: Option<f64>,
}

fn check_batch(arch: &ArchSpec, batch: &Tensor) -> Result<()> {
    if batch.rank() != 4 || batch.shape()[1..] != arch.input {
        return Err(NnError::InputShape {
            got: batch.shape().to_vec(),
            expected: arch.input,
        });
    }
    Ok(())
}

impl Classifier {
    /// Fan-in scaled uniform initialization: weights `U(±sqrt(6/fan_in))`,
    /// biases `U(±1/sqrt(fan_in))`, drawn in parameter order.
    pub fn build(arch: ArchSpec, seed: u64) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        let mut rng = seed::rng(seed);
        let mut params = Vec::with_capacity(2 * shapes.len());
        for (i, (ws, bs)) in shapes.into_iter().enumerate() {
            let fan_in: usize = match arch.layers[i] {
                LayerSpec::Conv { .. } => ws[1..].iter().product(),
                LayerSpec::Dense { .. } => ws[0],
            };
            let wb = (6.0 / fan_in as f64).sqrt();
            let bb = 1.0 / (fan_in as f64).sqrt();
            let wn: usize = ws.iter().product();
            let w: Vec<f64> = (0..wn).map(|_| rng.gen_range(-wb..wb)).collect();
            let b: Vec<f64> = (0..bs[0]).map(|_| rng.gen_range(-bb..bb)).collect();
            params.push(ParamSet {
                name: format!("layer{i}.weight"),
                ordinal: 2 * i,
                tensor: Tensor::new(ws, w)?,
            });
            params.push(ParamSet {
                name: format!("layer{i}.bias"),
                ordinal: 2 * i + 1,
                tensor: Tensor::new(bs, b)?,
            });
        }
        let norm = Normalization::identity(arch.input[0]);
        Ok(Self {
            arch,
            params,
            norm,
            seed,
            val_accuracy: None,
        })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn layer_count(&self) -> usize {
        self.arch.layers.len()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Records the forward pass of `input` on `tape`.
    ///
    /// With `trainable`, parameters are recorded as named gradient leaves;
    /// otherwise as constants.
    pub fn record(&self, tape: &mut Tape, input: NodeId, trainable: bool) -> Result<ForwardNodes> {
        check_batch(&self.arch, tape.value(input)?)?;
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.name.clone(), p.tensor.clone())
                } else {
                    tape.leaf(p.tensor.clone(), false)
                }
            })
            .collect();
        let scale: Vec<f64> = self.norm.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self.norm.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        let mut x = tape.channel_affine(input, &scale, &shift)?;
        let mut activations = Vec::with_capacity(self.arch.layers.len());
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            let act = match *layer {
                LayerSpec::Conv {
                    padding, activation, ..
                } => {
                    x = tape.conv2d(x, w, Conv2dAttrs { stride: 1, padding })?;
                    x = tape.add_bias(x, b)?;
                    activation
                }
                LayerSpec::Dense { activation, .. } => {
                    let shape = tape.value(x)?.shape().to_vec();
                    if shape.len() != 2 {
                        let flat: usize = shape[1..].iter().product();
                        x = tape.reshape(x, &[shape[0], flat])?;
                    }
                    x = tape.matmul(x, w)?;
                    x = tape.add_bias(x, b)?;
                    activation
                }
            };
            if act == Activation::Relu {
                x = tape.relu(x)?;
            }
            if let LayerSpec::Conv { pool: Some(p), .. } = *layer {
                x = tape.maxpool2d(x, p)?;
            }
            activations.push(x);
        }
        Ok(ForwardNodes {
            logits: x,
            activations,
            params,
        })
    }

    /// Logits `[B, N]` and the output of every layer, in layer order.
    pub fn forward_with_activations(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), false);
        let nodes = self.record(&mut tape, input, false)?;
        let acts = nodes
            .activations
            .iter()
            .map(|&a| tape.value(a).cloned())
            .collect::<std::result::Result<_, _>>()?;
        Ok((tape.value(nodes.logits)?.clone(), acts))
    }

    /// Logits for a batch of any size, evaluated in fixed-size chunks.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(&self.arch, batch)?;
        let n = batch.shape()[0];
        let mut parts = Vec::with_capacity(n.div_ceil(INFERENCE_CHUNK));
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let chunk = batch.slice_outer(start, INFERENCE_CHUNK.min(n - start))?;
            let mut tape = Tape::new();
            let input = tape.leaf(chunk, false);
            let nodes = self.record(&mut tape, input, false)?;
            parts.push(tape.value(nodes.logits)?.clone());
        }
        Ok(Tensor::concat_outer(&parts)?)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(argmax_rows(&logits))
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Evaluates `loss(tape, logits)` on `batch` and returns the loss value
    /// with its gradient with respect to the raw input pixels.
    pub fn input_gradient(
        &self,
        batch: &Tensor,
        loss: impl FnOnce(&mut Tape, NodeId) -> std::result::Result<NodeId, TensorError>,
    ) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), true);
        let nodes = self.record(&mut tape, input, false)?;
        let root = loss(&mut tape, nodes.logits)?;
        let value = tape.value(root)?.item().unwrap_or(f64::NAN);
        Ok((value, tape.grad_wrt_input(root, input)?))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_MAGIC);
        c.set("arch", serde_json::to_string(&self.arch).expect("arch serializes"));
        c.set("seed", self.seed);
        c.set("classes", self.arch.classes);
        c.set("norm_mean", join_floats(&self.norm.mean));
        c.set("norm_std", join_floats(&self.norm.std));
        c.set(
            "val_accuracy",
            self.val_accuracy.map_or("none".to_string(), |v| format!("{v:e}")),
        );
        for p in &self.params {
            c.records.push((p.name.clone(), p.tensor.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let arch: ArchSpec = serde_json::from_str(c.get("arch")?)
            .map_err(|e| ContainerError::CorruptHeader(format!("arch: {e}")))?;
        let classes: usize = c.parse("classes")?;
        if classes != arch.classes {
            return Err(ContainerError::Mismatch(format!(
                "classes {classes} disagrees with arch ({})",
                arch.classes
            ))
            .into());
        }
        let shapes = arch
            .param_shapes()
            .map_err(|e| ContainerError::CorruptHeader(format!("arch: {e}")))?;
        let expected: Vec<(String, Vec<usize>)> = shapes
            .into_iter()
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("layer{i}.weight"), w), (format!("layer{i}.bias"), b)])
            .collect();
        if expected.len() != c.records.len() {
            return Err(ContainerError::Mismatch(format!(
                "{} parameter records, architecture needs {}",
                c.records.len(),
                expected.len()
            ))
            .into());
        }
        let mut params = Vec::with_capacity(expected.len());
        for (ordinal, ((name, shape), (rname, tensor))) in expected.iter().zip(&c.records).enumerate() {
            if name != rname || shape.as_slice() != tensor.shape() {
                return Err(ContainerError::Mismatch(format!(
                    "record {ordinal}: found `{rname}` {:?}, expected `{name}` {shape:?}",
                    tensor.shape()
                ))
                .into());
            }
            params.push(ParamSet {
                name: name.clone(),
                ordinal,
                tensor: tensor.clone(),
            });
        }
        let norm = Normalization {
            mean: parse_floats(c.get("norm_mean")?)?,
            std: parse_floats(c.get("norm_std")?)?,
        };
        if norm.mean.len() != arch.input[0] || norm.std.len() != arch.input[0] {
            return Err(ContainerError::Mismatch("normalization channel count".into()).into());
        }
        let val_accuracy = match c.get("val_accuracy")? {
            "none" => None,
            _ => Some(c.parse("val_accuracy")?),
        };
        Ok(Self {
            arch,
            params,
            norm,
            seed: c.parse("seed")?,
            val_accuracy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, CHECKPOINT_MAGIC)?)
    }
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(raw: &str) -> std::result::Result<Vec<f64>, ContainerError> {
    raw.split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| ContainerError::CorruptHeader(format!("bad float {s:?}")))
        })
        .collect()
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(NnError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(NnError::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Minibatch SGD with momentum on softmax cross-entropy.
///
/// Weight decay is added to the gradient (`g + wd * theta`) before the
/// momentum update. Single-threaded; bit-reproducible for a fixed seed.
pub fn train_classifier(
    mut model: Classifier,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Classifier, Vec<EpochStats>)> {
    cfg.validate()?;
    let train_labels = train.class_labels()?;
    let val_labels = val.class_labels()?;
    for &label in train_labels.iter().chain(&val_labels) {
        if label >= model.classes() {
            return Err(NnError::Label {
                label,
                classes: model.classes(),
            });
        }
    }
    let mut rng = seed::rng(cfg.seed);
    let mut velocity: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images = train.images.select_outer(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut tape = Tape::new();
            let input = tape.leaf(images, false);
            let nodes = model.record(&mut tape, input, true)?;
            let loss = tape.cross_entropy(nodes.logits, &labels, Reduction::Mean)?;
            let loss_value = tape.value(loss)?.item().unwrap_or(f64::NAN);
            if !loss_value.is_finite() {
                return Err(NnError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_value * chunk.len() as f64;
            correct += argmax_rows(tape.value(nodes.logits)?)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            let grads = tape.backward(loss)?;
            for ((param, vel), node) in model.params.iter_mut().zip(&mut velocity).zip(&nodes.params) {
                let g = grads.get(*node).expect("trainable parameter has a gradient");
                let data = param.tensor.data_mut();
                for ((theta, v), gv) in data.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + gv + cfg.weight_decay * *theta;
                    *theta -= cfg.learning_rate * *v;
                }
            }
        }
        let val_accuracy = model.accuracy(&val.images, &val_labels)?;
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} val acc {:.4}",
            loss_sum / train.len() as f64,
            correct as f64 / train.len() as f64,
            val_accuracy
        );
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
        });
        model.val_accuracy = Some(val_accuracy);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GLYPH_INPUT: [usize; 3] = [1, 16, 16];

    #[test]
    fn small_cnn_has_eight_param_sets() {
        let m = Classifier::build(ArchSpec::small_cnn(GLYPH_INPUT, 10), 1).unwrap();
        assert_eq!(
            m.param_names(),
            vec![
                "layer0.weight",
                "layer0.bias",
                "layer1.weight",
                "layer1.bias",
                "layer2.weight",
                "layer2.bias",
                "layer3.weight",
                "layer3.bias"
            ]
        );
        // 16x16 -> pool -> 8x8 -> pool -> 4x4 x 16 channels feeds the dense layer.
        assert_eq!(m.params[4].tensor.shape(), &[256, 64]);
        assert!(m.params.iter().enumerate().all(|(i, p)| p.ordinal == i));
    }

    #[test]
    fn mlp_has_four_param_sets() {
        let m = Classifier::build(ArchSpec::mlp(GLYPH_INPUT, 64, 10), 1).unwrap();
        assert_eq!(m.params.len(), 4);
        assert_eq!(m.params[0].tensor.shape(), &[256, 64]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Classifier::build(ArchSpec::small_cnn(GLYPH_INPUT, 10), 3).unwrap();
        let b = Classifier::build(ArchSpec::small_cnn(GLYPH_INPUT, 10), 3).unwrap();
        assert_eq!(a, b);
        let c = Classifier::build(ArchSpec::small_cnn(GLYPH_INPUT, 10), 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn incomposable_arch_names_first_bad_layer() {
        let mut arch = ArchSpec::small_cnn(GLYPH_INPUT, 10);
        arch.layers.swap(1, 2);
        match Classifier::build(arch, 0) {
            Err(NnError::Arch { layer: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut arch = ArchSpec::mlp(GLYPH_INPUT, 8, 10);
        arch.classes = 3;
        assert!(matches!(Classifier::build(arch, 0), Err(NnError::Arch { layer: 1, .. })));
        let arch = ArchSpec {
            input: [1, 4, 4],
            classes: 2,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 5,
                    padding: 0,
                    activation: Activation::Relu,
                    pool: None,
                },
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Identity,
                },
            ],
        };
        assert!(matches!(Classifier::build(arch, 0), Err(NnError::Arch { layer: 0, .. })));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_everything() {
        let mut m = Classifier::build(ArchSpec::mlp(GLYPH_INPUT, 16, 10), 2).unwrap();
        for p in m.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        let (logits, acts) = m.forward_with_activations(&Tensor::zeros(&[3, 1, 16, 16])).unwrap();
        assert_eq!(acts.len(), m.layer_count());
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(acts.iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn wrong_batch_shape_rejected() {
        let m = Classifier::build(ArchSpec::small_cnn(GLYPH_INPUT, 10), 0).unwrap();
        assert!(matches!(
            m.forward_with_activations(&Tensor::zeros(&[2, 1, 8, 8])),
            Err(NnError::InputShape { .. })
        ));
    }

    #[test]
    fn normalization_fit() {
        let t = Tensor::new(vec![2, 1, 1, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let n = Normalization::fit(&t);
        assert_eq!(n.mean, vec![0.5]);
        assert_eq!(n.std, vec![0.5]);
        let flat = Normalization::fit(&Tensor::full(&[2, 1, 2, 2], 0.3));
        assert_eq!(flat.std, vec![1.0]);
    }
}
