//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Images are `[C, H, W]` without a batch axis: the networks process one frame
//! at a time and thread recurrent state through the tape, so backward over a
//! whole sequence is backpropagation through time.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};

/// Row-major dense array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Shape, "zero extent in shape {:?}", shape);
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Shape, "shape {:?} needs {} values, got {}", shape, n, data.len());
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            bail!(Shape, "cannot reshape {:?} to {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => bail!(Shape, "expected [C,H,W], got {:?}", self.shape),
        }
    }

    fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => bail!(Shape, "expected a rank-4 kernel, got {:?}", self.shape),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, stride: usize, padding: usize },
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    UpConv2 { input: NodeId, kernel: NodeId },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Affine { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    SoftmaxCe { logits: NodeId, labels: Vec<u8> },
    Mse { pred: NodeId, target: Vec<f64> },
    Mean(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^a)`.
fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + libm::log1p(libm::exp(-a))
    } else {
        libm::log1p(libm::exp(a))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`], if the node was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.nodes[id.0].value.grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::NoForward(id.0));
        }
        Ok(())
    }

    /// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kh,kw]`, zero padded.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = bias.map(|b| self.value(b).data());
        let out = conv2d_forward(x, k, b, stride, padding)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, stride, padding }))
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (c, h, w) = x.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            bail!(Shape, "maxpool2 needs even extents, got {}x{}", h, w);
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        let xd = x.data();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if best == usize::MAX || xd[idx] > best_v {
                                best = idx;
                                best_v = xd[idx];
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best_v;
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2 { input, argmax }))
    }

    /// Transposed convolution, stride 2, kernel `[C_in,C_out,2,2]`, no padding.
    pub fn upconv2(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let out = upconv2_forward(self.value(input), self.value(kernel))?;
        Ok(self.push(out, Op::UpConv2 { input, kernel }))
    }

    /// Training-mode batch norm over the spatial positions of one frame.
    /// Returns the node and the measured statistics.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let x = self.value(input);
        let (c, h, w) = x.dims3()?;
        let n = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let plane = &x.data()[ch * n..(ch + 1) * n];
            let m = plane.iter().sum::<f64>() / n as f64;
            mean[ch] = m;
            var[ch] = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        }
        let id = self.normalize(input, gamma, beta, &mean, &var, eps, true)?;
        Ok((id, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed statistics; differentiable in all
    /// of `input`, `gamma`, `beta`.
    pub fn batchnorm_fixed(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &BatchStats,
        eps: f64,
    ) -> Result<NodeId> {
        self.normalize(input, gamma, beta, &stats.mean, &stats.var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch: bool,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let (c, h, w) = x.dims3()?;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
            bail!(Shape, "batchnorm parameters must have {} channels", c);
        }
        let n = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                let idx = ch * n + i;
                xhat[idx] = (x.data()[idx] - mean[ch]) * inv_std[ch];
                out[idx] = g[ch] * xhat[idx] + b[ch];
            }
        }
        let t = Tensor::new(&[c, h, w], out)?;
        let op = if batch {
            Op::BatchNorm { input, gamma, beta, xhat, inv_std }
        } else {
            Op::Affine { input, gamma, beta, xhat, inv_std }
        };
        Ok(self.push(t, op))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let t = Tensor { shape: x.shape.clone(), data, grad: None };
        self.push(t, op)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, libm::tanh, Op::Tanh(a))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape != y.shape {
            bail!(Shape, "operands {:?} and {:?} differ", x.shape, y.shape);
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor { shape: x.shape.clone(), data, grad: None };
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Stacks `[C_k,H,W]` inputs along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            bail!(InvalidArgument, "concat of nothing");
        }
        let (_, h, w) = self.value(parts[0]).dims3()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                bail!(Shape, "concat spatial mismatch {}x{} vs {}x{}", ph, pw, h, w);
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[c_total, h, w], data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Fully connected layer: `weight [out,in] · flatten(input) + bias`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input).data();
        let wt = self.value(weight);
        let (out_dim, in_dim) = match wt.shape[..] {
            [o, i] => (o, i),
            _ => bail!(Shape, "linear weight must be rank 2, got {:?}", wt.shape),
        };
        if in_dim != x.len() || self.value(bias).len() != out_dim {
            bail!(Shape, "linear expects {} inputs and {} biases", in_dim, out_dim);
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = (0..out_dim)
            .map(|o| {
                let row = &wt.data()[o * in_dim..(o + 1) * in_dim];
                b[o] + row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()
            })
            .collect();
        let t = Tensor::new(&[out_dim], out)?;
        Ok(self.push(t, Op::Linear { input, weight, bias }))
    }

    /// Mean two-class cross entropy over all pixels of `[2,H,W]` logits.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
        let l = self.value(logits);
        let (c, h, w) = l.dims3()?;
        let n = h * w;
        if c != 2 || labels.len() != n {
            bail!(Shape, "softmax_ce needs [2,H,W] logits and H*W labels");
        }
        let mut total = 0.0;
        for i in 0..n {
            let (bg, fg) = (l.data()[i], l.data()[n + i]);
            let (own, other) = if labels[i] != 0 { (fg, bg) } else { (bg, fg) };
            total += softplus(other - own);
        }
        let t = Tensor::scalar(total / n as f64);
        Ok(self.push(t, Op::SoftmaxCe { logits, labels: labels.to_vec() }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            bail!(Shape, "mse length {} vs target {}", p.len(), target.len());
        }
        let s: f64 = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let t = Tensor::scalar(s / p.len() as f64);
        Ok(self.push(t, Op::Mse { pred, target: target.to_vec() }))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            bail!(InvalidArgument, "mean of nothing");
        }
        let mut s = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                bail!(Shape, "mean expects scalars, got {:?}", v.shape);
            }
            s += v.item();
        }
        Ok(self.push(Tensor::scalar(s / parts.len() as f64), Op::Mean(parts.to_vec())))
    }

    /// Reverse-mode sweep from a scalar node. Gradients of earlier runs are
    /// discarded first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            bail!(Shape, "backward needs a scalar loss, got {:?}", self.nodes[loss.0].value.shape);
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].value.grad.take() else { continue };
            self.propagate(idx, &g)?;
            self.nodes[idx].value.grad = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64], &Self)) {
        let mut buf = match self.nodes[id.0].value.grad.take() {
            Some(b) => b,
            None => vec![0.0; self.nodes[id.0].value.len()],
        };
        f(&mut buf, self);
        self.nodes[id.0].value.grad = Some(buf);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        // Ops are swapped out while their inputs are written to; the node's own
        // value stays in place for ops that need their output.
        let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Conv2d { input, kernel, bias, stride, padding } => {
                let (dx, dk, db) = {
                    let x = self.value(input);
                    let k = self.value(kernel);
                    let dx = conv2d_input_adjoint(g, k, x.shape(), stride, padding)?;
                    let dk = conv2d_kernel_grad(g, x, k.shape(), stride, padding)?;
                    let co = k.shape()[0];
                    let plane = g.len() / co;
                    let db: Vec<f64> =
                        (0..co).map(|c| g[c * plane..(c + 1) * plane].iter().sum()).collect();
                    (dx, dk, db)
                };
                self.acc(input, |b, _| add_into(b, &dx));
                self.acc(kernel, |b, _| add_into(b, &dk));
                if let Some(bias) = bias {
                    self.acc(bias, |b, _| add_into(b, &db));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                self.acc(*input, |b, _| {
                    for (o, &src) in argmax.iter().enumerate() {
                        b[src] += g[o];
                    }
                });
            }
            &Op::UpConv2 { input, kernel } => {
                let (dx, dk) = {
                    let x = self.value(input);
                    let k = self.value(kernel);
                    upconv2_backward(g, x, k)?
                };
                self.acc(input, |b, _| add_into(b, &dx));
                self.acc(kernel, |b, _| add_into(b, &dk));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std }
            | Op::Affine { input, gamma, beta, xhat, inv_std } => {
                let batch = matches!(op, Op::BatchNorm { .. });
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gam = self.value(*gamma).data().to_vec();
                let mut dg = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * n];
                for ch in 0..c {
                    let gs = &g[ch * n..(ch + 1) * n];
                    let xs = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    dg[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let scale = gam[ch] * inv_std[ch];
                    for i in 0..n {
                        dx[ch * n + i] = if batch {
                            scale * (gs[i] - sum_g / n as f64 - xs[i] * sum_gx / n as f64)
                        } else {
                            scale * gs[i]
                        };
                    }
                }
                self.acc(*input, |b, _| add_into(b, &dx));
                self.acc(*gamma, |b, _| add_into(b, &dg));
                self.acc(*beta, |b, _| add_into(b, &dbeta));
            }
            &Op::Relu(a) => {
                self.acc(a, |b, s| {
                    for ((bi, &gi), &x) in b.iter_mut().zip(g).zip(s.value(a).data()) {
                        if x > 0.0 {
                            *bi += gi;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(a, |b, _| {
                    for ((bi, &gi), &yi) in b.iter_mut().zip(g).zip(&y) {
                        *bi += gi * yi * (1.0 - yi);
                    }
                });
            }
            &Op::Tanh(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(a, |b, _| {
                    for ((bi, &gi), &yi) in b.iter_mut().zip(g).zip(&y) {
                        *bi += gi * (1.0 - yi * yi);
                    }
                });
            }
            &Op::Add(a, b2) => {
                self.acc(a, |b, _| add_into(b, g));
                self.acc(b2, |b, _| add_into(b, g));
            }
            &Op::Sub(a, b2) => {
                self.acc(a, |b, _| add_into(b, g));
                self.acc(b2, |b, _| {
                    for (bi, &gi) in b.iter_mut().zip(g) {
                        *bi -= gi;
                    }
                });
            }
            &Op::Mul(a, b2) => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b2).data().to_vec();
                self.acc(a, |b, _| {
                    for ((bi, &gi), &o) in b.iter_mut().zip(g).zip(&bv) {
                        *bi += gi * o;
                    }
                });
                self.acc(b2, |b, _| {
                    for ((bi, &gi), &o) in b.iter_mut().zip(g).zip(&av) {
                        *bi += gi * o;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(p, |b, _| add_into(b, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::Reshape(a) => self.acc(a, |b, _| add_into(b, g)),
            &Op::Linear { input, weight, bias } => {
                let x = self.value(input).data().to_vec();
                let wt = self.value(weight).data().to_vec();
                let in_dim = x.len();
                self.acc(input, |b, _| {
                    for (o, &go) in g.iter().enumerate() {
                        for (bi, &w) in b.iter_mut().zip(&wt[o * in_dim..(o + 1) * in_dim]) {
                            *bi += go * w;
                        }
                    }
                });
                self.acc(weight, |b, _| {
                    for (o, &go) in g.iter().enumerate() {
                        for (bi, &xi) in b[o * in_dim..(o + 1) * in_dim].iter_mut().zip(&x) {
                            *bi += go * xi;
                        }
                    }
                });
                self.acc(bias, |b, _| add_into(b, g));
            }
            Op::SoftmaxCe { logits, labels } => {
                let l = self.value(*logits).data().to_vec();
                let n = labels.len();
                let scale = g[0] / n as f64;
                self.acc(*logits, |b, _| {
                    for i in 0..n {
                        let p_fg = sigmoid(l[n + i] - l[i]);
                        let t = if labels[i] != 0 { 1.0 } else { 0.0 };
                        b[n + i] += scale * (p_fg - t);
                        b[i] += scale * (t - p_fg);
                    }
                });
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data().to_vec();
                let scale = 2.0 * g[0] / p.len() as f64;
                self.acc(*pred, |b, _| {
                    for ((bi, pi), ti) in b.iter_mut().zip(&p).zip(target) {
                        *bi += scale * (pi - ti);
                    }
                });
            }
            Op::Mean(parts) => {
                let share = g[0] / parts.len() as f64;
                for &p in parts {
                    self.acc(p, |b, _| b[0] += share);
                }
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        bail!(InvalidArgument, "stride must be positive");
    }
    let span = input + 2 * padding;
    if k > span {
        bail!(Shape, "kernel {} exceeds padded extent {}", k, span);
    }
    if !(span - k).is_multiple_of(stride) {
        bail!(Shape, "non-integer output extent: ({} - {}) / {}", span, k, stride);
    }
    Ok((span - k) / stride + 1)
}

/// Output positions `o` such that `o*stride + k - padding` lands in `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    let hi = if n + padding <= k { 0 } else { ((n - 1 + padding - k) / stride + 1).min(out) };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (ci, h, w) = x.dims3()?;
    let (co, kci, kh, kw) = k.dims4()?;
    if kci != ci {
        bail!(Shape, "kernel expects {} input channels, input has {}", kci, ci);
    }
    if let Some(b) = bias {
        if b.len() != co {
            bail!(Shape, "bias length {} vs {} output channels", b.len(), co);
        }
    }
    let oh = conv_extent(h, kh, stride, padding)?;
    let ow = conv_extent(w, kw, stride, padding)?;
    let mut out = vec![0.0; co * oh * ow];
    let (xd, kd) = (x.data(), k.data());
    for o in 0..co {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..ci {
            for ky in 0..kh {
                let (y0, y1) = valid_range(h, oh, ky, stride, padding);
                for kx in 0..kw {
                    let wv = kd[((o * ci + c) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(w, ow, kx, stride, padding);
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - padding;
                        let row = &xd[(c * h + iy) * w..(c * h + iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[co, oh, ow], out)
}

/// Adjoint of [`conv2d_forward`] with respect to its input: maps an output-shaped
/// array back onto `input_shape` with the same kernel (a transposed convolution).
pub fn conv2d_input_adjoint(
    dout: &[f64],
    k: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Vec<f64>> {
    let (ci, h, w) = match *input_shape {
        [c, h, w] => (c, h, w),
        _ => bail!(Shape, "expected [C,H,W] input shape"),
    };
    let (co, _, kh, kw) = k.dims4()?;
    let oh = conv_extent(h, kh, stride, padding)?;
    let ow = conv_extent(w, kw, stride, padding)?;
    if dout.len() != co * oh * ow {
        bail!(Shape, "adjoint input has {} values, expected {}", dout.len(), co * oh * ow);
    }
    let mut dx = vec![0.0; ci * h * w];
    let kd = k.data();
    for o in 0..co {
        let plane = &dout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            for ky in 0..kh {
                let (y0, y1) = valid_range(h, oh, ky, stride, padding);
                for kx in 0..kw {
                    let wv = kd[((o * ci + c) * kh + ky) * kw + kx];
                    let (x0, x1) = valid_range(w, ow, kx, stride, padding);
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - padding;
                        let row = &mut dx[(c * h + iy) * w..(c * h + iy + 1) * w];
                        let grow = &plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            row[ox * stride + kx - padding] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn conv2d_kernel_grad(
    dout: &[f64],
    x: &Tensor,
    kshape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Vec<f64>> {
    let (ci, h, w) = x.dims3()?;
    let (co, kh, kw) = (kshape[0], kshape[2], kshape[3]);
    let oh = conv_extent(h, kh, stride, padding)?;
    let ow = conv_extent(w, kw, stride, padding)?;
    let mut dk = vec![0.0; co * ci * kh * kw];
    let xd = x.data();
    for o in 0..co {
        let plane = &dout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            for ky in 0..kh {
                let (y0, y1) = valid_range(h, oh, ky, stride, padding);
                for kx in 0..kw {
                    let (x0, x1) = valid_range(w, ow, kx, stride, padding);
                    let mut s = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - padding;
                        let row = &xd[(c * h + iy) * w..(c * h + iy + 1) * w];
                        let grow = &plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            s += grow[ox] * row[ox * stride + kx - padding];
                        }
                    }
                    dk[((o * ci + c) * kh + ky) * kw + kx] = s;
                }
            }
        }
    }
    Ok(dk)
}

pub fn upconv2_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (ci, h, w) = x.dims3()?;
    let (kci, co, kh, kw) = k.dims4()?;
    if kci != ci || kh != 2 || kw != 2 {
        bail!(Shape, "upconv2 kernel must be [{},C_out,2,2], got {:?}", ci, k.shape());
    }
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; co * oh * ow];
    let (xd, kd) = (x.data(), k.data());
    for c in 0..ci {
        for o in 0..co {
            let kb = (c * co + o) * 4;
            for y in 0..h {
                for xx in 0..w {
                    let v = xd[(c * h + y) * w + xx];
                    let base = (o * oh + 2 * y) * ow + 2 * xx;
                    out[base] += v * kd[kb];
                    out[base + 1] += v * kd[kb + 1];
                    out[base + ow] += v * kd[kb + 2];
                    out[base + ow + 1] += v * kd[kb + 3];
                }
            }
        }
    }
    Tensor::new(&[co, oh, ow], out)
}

fn upconv2_backward(g: &[f64], x: &Tensor, k: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ci, h, w) = x.dims3()?;
    let (_, co, _, _) = k.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; ci * h * w];
    let mut dk = vec![0.0; k.len()];
    let (xd, kd) = (x.data(), k.data());
    for c in 0..ci {
        for o in 0..co {
            let kb = (c * co + o) * 4;
            for y in 0..h {
                for xx in 0..w {
                    let base = (o * oh + 2 * y) * ow + 2 * xx;
                    let gs = [g[base], g[base + 1], g[base + ow], g[base + ow + 1]];
                    let xi = (c * h + y) * w + xx;
                    let v = xd[xi];
                    for q in 0..4 {
                        dx[xi] += gs[q] * kd[kb + q];
                        dk[kb + q] += gs[q] * v;
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// Foreground probability per pixel for `[2,H,W]` logits.
pub fn foreground_probability(logits: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = logits.dims3()?;
    if c != 2 {
        bail!(Shape, "expected 2 logit channels, got {}", c);
    }
    let n = h * w;
    let d = logits.data();
    Ok((0..n).map(|i| sigmoid(d[n + i] - d[i])).collect())
}
