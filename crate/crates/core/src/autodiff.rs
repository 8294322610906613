//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`], so node indices are a
//! topological order by construction and the graph cannot contain cycles.
//! [`Tape::backward`] walks the nodes in reverse, accumulating
//! vector-Jacobian products into every node that requires a gradient.

use crate::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Loss reduction over the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    ChannelAffine { input: NodeId, scale: Vec<f64> },
    MatMul(NodeId, NodeId),
    Conv2d { input: NodeId, kernel: NodeId, attrs: Conv2dAttrs },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Clip { input: NodeId, lo: f64, hi: f64 },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, softmax: Vec<f64>, reduction: Reduction },
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Records a computation graph for one forward pass.
///
/// Tapes are single-threaded; independent graphs can be built on separate
/// threads since a tape owns copies of every value it records.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient for `node`, or `None` if the node does not require one.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.grads.get_mut(node.0).and_then(|g| g.take())
    }

    /// Gradients of the named leaves, in the order they were registered.
    pub fn named(&self) -> Vec<(&str, &Tensor)> {
        self.names
            .iter()
            .filter_map(|(name, idx)| self.grads[*idx].as_ref().map(|g| (name.as_str(), g)))
            .collect()
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn conv_out_dim(input: usize, kernel: usize, attrs: Conv2dAttrs) -> Option<usize> {
    let padded = input + 2 * attrs.padding;
    (padded >= kernel && attrs.stride > 0).then(|| (padded - kernel) / attrs.stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(TensorError::NotOnTape(id.0))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a trainable tensor whose gradient is reported by name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].name = Some(name.into());
        id
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.node(id)?.value)
    }

    pub fn requires_grad(&self, id: NodeId) -> Result<bool> {
        Ok(self.node(id)?.requires_grad)
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let value = self.node(a)?.value.zip_map(&self.node(b)?.value, name, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "multiply", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let value = self.node(a)?.value.map(|v| v * k);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, k), rg))
    }

    /// Adds a `[C]` bias to a `[B, C, ...]` input, broadcasting over the
    /// batch and any trailing spatial dimensions.
    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let b = &self.node(bias)?.value;
        if x.rank() < 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
            return Err(shape_err("add_bias", x, b));
        }
        let (batch, channels) = (x.shape()[0], x.shape()[1]);
        let inner = x.len() / (batch * channels);
        let mut out = x.clone();
        let bd = b.data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[(i / inner) % channels];
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(out, Op::AddBias(input, bias), rg))
    }

    /// Per-channel `x * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, input: NodeId, scale: &[f64], shift: &[f64]) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        if x.rank() < 2 || x.shape()[1] != scale.len() || scale.len() != shift.len() {
            return Err(invalid(
                "channel_affine",
                x,
                format!("expected {} channels", scale.len()),
            ));
        }
        let (batch, channels) = (x.shape()[0], x.shape()[1]);
        let inner = x.len() / (batch * channels);
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / inner) % channels;
            *v = *v * scale[c] + shift[c];
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let x = &self.node(a)?.value;
        let y = &self.node(b)?.value;
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(shape_err("matmul", x, y));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(x.data(), y.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// 2-d cross-correlation of `[B, Cin, H, W]` with a `[Cout, Cin, KH, KW]` kernel.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, attrs: Conv2dAttrs) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let k = &self.node(kernel)?.value;
        if x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1] {
            return Err(shape_err("conv2d", x, k));
        }
        let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (Some(ho), Some(wo)) = (conv_out_dim(h, kh, attrs), conv_out_dim(w, kw, attrs)) else {
            return Err(shape_err("conv2d", x, k));
        };
        let geom = ConvGeom { b, ci, h, w, co, kh, kw, ho, wo, attrs };
        let mut out = vec![0.0; b * co * ho * wo];
        geom.forward(x.data(), k.data(), &mut out);
        let value = Tensor::new(vec![b, co, ho, wo], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, attrs }, rg))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let value = self.node(a)?.value.map(f);
        let rg = self.rg(&[a]);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Natural logarithm; non-positive inputs produce `-inf`/NaN as `f64::ln` does.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clip { input: a, lo, hi })
    }

    /// Non-overlapping `size x size` max pooling over `[B, C, H, W]`.
    ///
    /// Ties route the gradient to the first maximal element in row-major order.
    pub fn maxpool2d(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        if x.rank() != 4 || size == 0 || x.shape()[2] < size || x.shape()[3] < size {
            return Err(invalid("maxpool2d", x, format!("pool size {size}")));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (h / size, w / size);
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * size * w + ow * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oh * size + dy) * w + ow * size + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.node(a)?.value.sum());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.node(a)?.value;
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let x = &self.node(a)?.value;
        let value = x.reshape(shape).map_err(|_| {
            invalid("reshape", x, format!("cannot view as {shape:?}"))
        })?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax cross-entropy of `[B, N]` logits against integer labels.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        let z = &self.node(logits)?.value;
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(invalid(
                "cross_entropy",
                z,
                format!("expected [{}, N] logits", labels.len()),
            ));
        }
        let n = z.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(invalid("cross_entropy", z, format!("label {bad} out of range")));
        }
        let mut softmax = vec![0.0; z.len()];
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let zr = &z.data()[row * n..(row + 1) * n];
            let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = zr.iter().map(|v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            total += lse - zr[label];
            for (s, v) in softmax[row * n..(row + 1) * n].iter_mut().zip(zr) {
                *s = (v - lse).exp();
            }
        }
        if reduction == Reduction::Mean {
            total /= labels.len() as f64;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
                reduction,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
    /// `-(1/n) sum[t log p + (1-t) log(1-p)]`, evaluated through softplus so
    /// that saturated logits never produce NaN.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let z = &self.node(logits)?.value;
        if z.len() != targets.len() {
            return Err(invalid(
                "bce_with_logits",
                z,
                format!("{} targets", targets.len()),
            ));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&v, &t)| t * softplus(-v) + (1.0 - t) * softplus(v))
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root` seeded with 1.0.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if root_node.requires_grad {
            grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let names = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| n.name.clone().map(|name| (name, i)))
            .collect();
        Ok(Gradients { grads, names })
    }

    /// `d root / d input`, shaped like `input`.
    pub fn grad_wrt_input(&self, root: NodeId, input: NodeId) -> Result<Tensor> {
        let node = self.node(input)?;
        if !node.requires_grad {
            return Err(TensorError::NoGradient(input.0));
        }
        if input.0 > root.0 {
            return Ok(Tensor::zeros(node.value.shape()));
        }
        let mut grads = self.backward(root)?;
        Ok(grads
            .take(input)
            .unwrap_or_else(|| Tensor::zeros(node.value.shape())))
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: NodeId, delta: impl FnOnce() -> Tensor) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut grads[to.0], delta());
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.send(grads, *a, || g.zip_map(bv, "multiply", |x, y| x * y).unwrap());
                self.send(grads, *b, || g.zip_map(av, "multiply", |x, y| x * y).unwrap());
            }
            Op::Scale(a, k) => self.send(grads, *a, || g.map(|v| v * k)),
            Op::AddBias(x, b) => {
                self.send(grads, *x, || g.clone());
                let bv = &self.nodes[b.0].value;
                self.send(grads, *b, || {
                    let shape = g.shape();
                    let (batch, channels) = (shape[0], shape[1]);
                    let inner = g.len() / (batch * channels);
                    let mut out = Tensor::zeros(bv.shape());
                    let od = out.data_mut();
                    for (i, v) in gd.iter().enumerate() {
                        od[(i / inner) % channels] += v;
                    }
                    out
                });
            }
            Op::ChannelAffine { input, scale } => self.send(grads, *input, || {
                let shape = g.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let inner = g.len() / (batch * channels);
                let mut out = g.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v *= scale[(i / inner) % channels];
                }
                out
            }),
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.send(grads, *a, || {
                    // dA = G * B^T
                    let mut out = vec![0.0; m * k];
                    let bd = bv.data();
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    Tensor::new(vec![m, k], out).unwrap()
                });
                self.send(grads, *b, || {
                    // dB = A^T * G
                    let mut out = vec![0.0; k * n];
                    let ad = av.data();
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * gv;
                            }
                        }
                    }
                    Tensor::new(vec![k, n], out).unwrap()
                });
            }
            Op::Conv2d { input, kernel, attrs } => {
                let xv = &self.nodes[input.0].value;
                let kv = &self.nodes[kernel.0].value;
                let (xs, ks, os) = (xv.shape(), kv.shape(), g.shape());
                let geom = ConvGeom {
                    b: xs[0],
                    ci: xs[1],
                    h: xs[2],
                    w: xs[3],
                    co: ks[0],
                    kh: ks[2],
                    kw: ks[3],
                    ho: os[2],
                    wo: os[3],
                    attrs: *attrs,
                };
                self.send(grads, *input, || {
                    let mut out = vec![0.0; xv.len()];
                    geom.backward_input(gd, kv.data(), &mut out);
                    Tensor::new(xs.to_vec(), out).unwrap()
                });
                self.send(grads, *kernel, || {
                    let mut out = vec![0.0; kv.len()];
                    geom.backward_kernel(gd, xv.data(), &mut out);
                    Tensor::new(ks.to_vec(), out).unwrap()
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                self.send(grads, *a, || {
                    g.zip_map(av, "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })
                        .unwrap()
                });
            }
            Op::Sigmoid(a) => self.send(grads, *a, || {
                g.zip_map(&node.value, "sigmoid", |gv, s| gv * s * (1.0 - s))
                    .unwrap()
            }),
            Op::Tanh(a) => self.send(grads, *a, || {
                g.zip_map(&node.value, "tanh", |gv, t| gv * (1.0 - t * t))
                    .unwrap()
            }),
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                self.send(grads, *a, || g.zip_map(av, "log", |gv, x| gv / x).unwrap());
            }
            Op::Softplus(a) => {
                let av = &self.nodes[a.0].value;
                self.send(grads, *a, || {
                    g.zip_map(av, "softplus", |gv, x| gv * sigmoid(x)).unwrap()
                });
            }
            Op::Clip { input, lo, hi } => {
                let av = &self.nodes[input.0].value;
                self.send(grads, *input, || {
                    g.zip_map(av, "clip", |gv, x| if x > *lo && x < *hi { gv } else { 0.0 })
                        .unwrap()
                });
            }
            Op::MaxPool2d { input, argmax } => {
                let av = &self.nodes[input.0].value;
                self.send(grads, *input, || {
                    let mut out = Tensor::zeros(av.shape());
                    let od = out.data_mut();
                    for (gv, &src) in gd.iter().zip(argmax) {
                        od[src] += gv;
                    }
                    out
                });
            }
            Op::Sum(a) => {
                let av = &self.nodes[a.0].value;
                self.send(grads, *a, || Tensor::full(av.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let av = &self.nodes[a.0].value;
                self.send(grads, *a, || Tensor::full(av.shape(), gd[0] / av.len() as f64));
            }
            Op::Reshape(a) => {
                let av = &self.nodes[a.0].value;
                self.send(grads, *a, || g.reshape(av.shape()).unwrap());
            }
            Op::CrossEntropy {
                logits,
                labels,
                softmax,
                reduction,
            } => {
                let zv = &self.nodes[logits.0].value;
                self.send(grads, *logits, || {
                    let n = zv.shape()[1];
                    let scale = match reduction {
                        Reduction::Mean => gd[0] / labels.len() as f64,
                        Reduction::Sum => gd[0],
                    };
                    let mut out = softmax.clone();
                    for (row, &label) in labels.iter().enumerate() {
                        out[row * n + label] -= 1.0;
                    }
                    for v in &mut out {
                        *v *= scale;
                    }
                    Tensor::new(zv.shape().to_vec(), out).unwrap()
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let zv = &self.nodes[logits.0].value;
                self.send(grads, *logits, || {
                    let scale = gd[0] / targets.len() as f64;
                    let data = zv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| scale * (sigmoid(z) - t))
                        .collect();
                    Tensor::new(zv.shape().to_vec(), data).unwrap()
                });
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
}

struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    attrs: Conv2dAttrs,
}

impl ConvGeom {
    /// Valid output range along one axis for kernel offset `k`: the output
    /// positions `o` with `0 <= o*stride + k - pad < len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.attrs.stride, self.attrs.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p <= len - 1  =>  o <= (len - 1 + p - k) / s
        let hi = if len + p > k {
            ((len - 1 + p - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        // f(input_index, kernel_index, output_index, count) is called once per
        // contiguous output row segment.
        let (s, p) = (self.attrs.stride, self.attrs.padding);
        for b in 0..self.b {
            for co in 0..self.co {
                let out_plane = (b * self.co + co) * self.ho * self.wo;
                for ci in 0..self.ci {
                    let in_plane = (b * self.ci + ci) * self.h * self.w;
                    for ky in 0..self.kh {
                        let (oy0, oy1) = self.valid(ky, self.h, self.ho);
                        for kx in 0..self.kw {
                            let (ox0, ox1) = self.valid(kx, self.w, self.wo);
                            if ox1 <= ox0 {
                                continue;
                            }
                            let kidx = ((co * self.ci + ci) * self.kh + ky) * self.kw + kx;
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let ix0 = ox0 * s + kx - p;
                                f(
                                    in_plane + iy * self.w + ix0,
                                    kidx,
                                    out_plane + oy * self.wo + ox0,
                                    ox1 - ox0,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64], out: &mut [f64]) {
        let s = self.attrs.stride;
        self.for_each_tap(|xi, ki, oi, count| {
            let wv = k[ki];
            for j in 0..count {
                out[oi + j] += wv * x[xi + j * s];
            }
        });
    }

    fn backward_input(&self, g: &[f64], k: &[f64], out: &mut [f64]) {
        let s = self.attrs.stride;
        self.for_each_tap(|xi, ki, oi, count| {
            let wv = k[ki];
            for j in 0..count {
                out[xi + j * s] += wv * g[oi + j];
            }
        });
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64], out: &mut [f64]) {
        let s = self.attrs.stride;
        self.for_each_tap(|xi, ki, oi, count| {
            let mut acc = 0.0;
            for j in 0..count {
                acc += g[oi + j] * x[xi + j * s];
            }
            out[ki] += acc;
        });
    }
}
