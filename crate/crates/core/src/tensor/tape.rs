use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{check_finite, invalid, Result, Tensor, TensorError};
use crate::exec::Exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own per-channel moments.
    Train,
    /// Normalize with stored running moments.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch moments observed by a train-mode batch norm
/// (`var` is the unbiased estimate, for running-average updates).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, geom: ConvGeom },
    AddBias { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Act { x: Var, kind: Activation },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { a: Var, b: Var },
    Slice { x: Var, start: usize },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Vec<f64> },
    Mean { x: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Bce { x: Var, target: Vec<f64> },
    L1 { x: Var, target: Vec<f64> },
    SoftmaxCe { x: Var, probs: Vec<f64>, target: Vec<usize>, pixel_weight: Vec<f64> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order; [`Tape::backward`] walks them in
/// reverse, visiting each node once.
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn conv_geom(&self, op: &'static str, dense: [usize; 4], kernel: &[usize], filters: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let [_, c, h, w] = dense;
        let k = kernel[2];
        if kernel.len() != 4 || kernel[3] != k {
            return Err(invalid(op, format!("kernel must be square [*, *, k, k], got {kernel:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(invalid(op, "kernel size and stride must be at least 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(invalid(op, format!("kernel {k} larger than padded input {h}x{w} (pad {pad})")));
        }
        Ok(ConvGeom { channels: c, height: h, width: w, filters, kernel: k, stride, pad })
    }

    /// Cross-correlation of `[N, C, H, W]` with kernel `[F, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).dims4("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != xs[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", left: xs.to_vec(), right: ws });
        }
        let geom = self.conv_geom("conv2d", xs, &ws, ws[0], stride, pad)?;
        let out = kernels::conv_forward(self.exec, self.value(x).data(), xs[0], self.value(w).data(), &geom);
        let shape = vec![xs[0], ws[0], geom.out_height(), geom.out_width()];
        self.push("conv2d", Tensor::from_parts(shape, out), &[x, w], Op::Conv { x, w, geom })
    }

    /// Transposed convolution of `[N, C, H, W]` with kernel `[C, F, k, k]`,
    /// giving `[N, F, (H-1)s - 2p + k, (W-1)s - 2p + k]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).dims4("conv2d_transpose")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != xs[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d_transpose", left: xs.to_vec(), right: ws });
        }
        let k = ws[2];
        if k == 0 || stride == 0 {
            return Err(invalid("conv2d_transpose", "kernel size and stride must be at least 1"));
        }
        let ho = ((xs[2] - 1) * stride + k).checked_sub(2 * pad);
        let wo = ((xs[3] - 1) * stride + k).checked_sub(2 * pad);
        let (ho, wo) = match (ho, wo) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(invalid("conv2d_transpose", "padding leaves an empty output")),
        };
        let geom = self.conv_geom("conv2d_transpose", [xs[0], ws[1], ho, wo], &ws, xs[1], stride, pad)?;
        if geom.out_height() != xs[2] || geom.out_width() != xs[3] {
            return Err(invalid("conv2d_transpose", "inconsistent geometry"));
        }
        let out = kernels::conv_backward_data(self.exec, self.value(x).data(), xs[0], self.value(w).data(), &geom);
        let shape = vec![xs[0], ws[1], ho, wo];
        self.push("conv2d_transpose", Tensor::from_parts(shape, out), &[x, w], Op::ConvTranspose { x, w, geom })
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(TensorError::ShapeMismatch { op: "add_bias", left: xs, right: bs });
        }
        let plane: usize = xs[2..].iter().product();
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[(i / plane) % xs[1]];
        }
        self.push("add_bias", Tensor::from_parts(xs, out), &[x, b], Op::AddBias { x, b })
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    left: vec![n, c, h, w],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let plane = h * w;
        let m = n * plane;
        let xd = self.value(x).data();
        let (mean, var_biased, stats) = match mode {
            BatchNormMode::Train => {
                if m < 2 {
                    return Err(invalid("batch_norm", "train mode needs at least two values per channel"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = (0..n).flat_map(|s| xd[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter());
                    let mu = vals.clone().sum::<f64>() / m as f64;
                    mean[ch] = mu;
                    var[ch] = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                }
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(invalid("batch_norm", "running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (i / plane) % c;
            *xh = (xd[i] - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let train = matches!(mode, BatchNormMode::Train);
        let v = self.push(
            "batch_norm",
            Tensor::from_parts(vec![n, c, h, w], out),
            &[x, gamma, beta],
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
        )?;
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push("activation", out, &[x], Op::Act { x, kind })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = xv.shape().to_vec();
        self.push("dropout", Tensor::from_parts(shape, out), &[x], Op::Dropout { x, mask })
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).dims4("concat_channels")?;
        let sb = self.value(b).dims4("concat_channels")?;
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", left: sa.to_vec(), right: sb.to_vec() });
        }
        let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for s in 0..sa[0] {
            out.extend_from_slice(&da[s * la..(s + 1) * la]);
            out.extend_from_slice(&db[s * lb..(s + 1) * lb]);
        }
        let shape = vec![sa[0], sa[1] + sb[1], sa[2], sa[3]];
        self.push("concat_channels", Tensor::from_parts(shape, out), &[a, b], Op::Concat { a, b })
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(invalid("slice_channels", format!("range {start}..{} outside {c} channels", start + len)));
        }
        let plane = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            out.extend_from_slice(&d[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        self.push("slice_channels", Tensor::from_parts(vec![n, len, h, w], out), &[x], Op::Slice { x, start })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(shape, out), &[a, b], Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, &[x], Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum { x })
    }

    /// Scalar `sum(x * weights)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                left: self.shape(x).to_vec(),
                right: weights.shape().to_vec(),
            });
        }
        let s = self.value(x).dot(weights);
        self.push("weighted_sum", Tensor::scalar(s), &[x], Op::WeightedSum { x, weights: weights.data().to_vec() })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean { x })
    }

    /// `[N, C, H, W]` to `[N, C, 1, 1]` by spatial averaging.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        let out: Vec<f64> = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        self.push("global_avg_pool", Tensor::from_parts(vec![n, c, 1, 1], out), &[x], Op::GlobalAvgPool { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, &[x], Op::Reshape { x })
    }

    /// Mean binary cross-entropy on logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(x).to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let total: f64 = xd
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / xd.len() as f64;
        self.push("bce_with_logits", Tensor::scalar(loss), &[x], Op::Bce { x, target: target.data().to_vec() })
    }

    /// Mean absolute error against a constant target.
    pub fn l1(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "l1",
                left: self.shape(x).to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let loss = xd.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / xd.len() as f64;
        self.push("l1", Tensor::scalar(loss), &[x], Op::L1 { x, target: target.data().to_vec() })
    }

    /// Per-pixel softmax cross-entropy of logits `[N, C, H, W]` against class
    /// indices laid out `[N, H, W]`. With class weights the mean is weighted
    /// (normalized by the total weight of the target pixels).
    pub fn softmax_cross_entropy(&mut self, x: Var, target: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
        let op = "softmax_cross_entropy";
        let [n, c, h, w] = self.value(x).dims4(op)?;
        let plane = h * w;
        if target.len() != n * plane {
            return Err(TensorError::ShapeMismatch { op, left: vec![n, c, h, w], right: vec![target.len()] });
        }
        if let Some(cw) = class_weights {
            if cw.len() != c {
                return Err(invalid(op, format!("{} class weights for {c} classes", cw.len())));
            }
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= c) {
            return Err(TensorError::ClassIndex { op, index: bad, classes: c });
        }
        let xd = self.value(x).data();
        let mut probs = vec![0.0; xd.len()];
        let weight_of = |t: usize| class_weights.map_or(1.0, |cw| cw[t]);
        let total_weight: f64 = target.iter().map(|&t| weight_of(t)).sum();
        if total_weight <= 0.0 {
            return Err(invalid(op, "target pixels carry zero total weight"));
        }
        let mut loss = 0.0;
        for s in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (s * c + ch) * plane + p;
                let max = (0..c).map(|ch| xd[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..c).map(|ch| (xd[idx(ch)] - max).exp()).sum();
                let lse = max + denom.ln();
                for ch in 0..c {
                    probs[idx(ch)] = (xd[idx(ch)] - lse).exp();
                }
                let t = target[s * plane + p];
                loss += weight_of(t) * (lse - xd[idx(t)]);
            }
        }
        loss /= total_weight;
        let pixel_weight = target.iter().map(|&t| weight_of(t) / total_weight).collect();
        self.push(
            op,
            Tensor::scalar(loss),
            &[x],
            Op::SoftmaxCe { x, probs, target: target.to_vec(), pixel_weight },
        )
    }

    /// Reverse sweep from a scalar loss; returns gradients for every leaf
    /// that requires grad (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads)?;
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(d) => Tensor::from_parts(shape, d),
                        None => Tensor::zeros(&shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, geom } => {
                let batch = self.shape(*x)[0];
                if self.wants(*x) {
                    let dx = kernels::conv_backward_data(self.exec, &g, batch, self.value(*w).data(), geom);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = kernels::conv_backward_filter(self.exec, self.value(*x).data(), &g, batch, geom);
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                let batch = self.shape(*x)[0];
                if self.wants(*x) {
                    let dx = kernels::conv_forward(self.exec, &g, batch, self.value(*w).data(), geom);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = kernels::conv_backward_filter(self.exec, &g, self.value(*x).data(), batch, geom);
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::AddBias { x, b } => {
                if self.wants(*b) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let plane: usize = xs[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let [n, c, h, w] = self.value(*x).dims4("batch_norm")?;
                let plane = h * w;
                let m = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = (i / plane) % c;
                    dgamma[ch] += gi * xhat[i];
                    dbeta[ch] += gi;
                    let dxh = gi * gam[ch];
                    sum_dxhat[ch] += dxh;
                    sum_dxhat_xhat[ch] += dxh * xhat[i];
                }
                if self.wants(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let ch = (i / plane) % c;
                            let dxh = gi * gam[ch];
                            if *train {
                                inv_std[ch] / m * (m * dxh - sum_dxhat[ch] - xhat[i] * sum_dxhat_xhat[ch])
                            } else {
                                dxh * inv_std[ch]
                            }
                        })
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Act { x, kind } => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let dx = g.iter().enumerate().map(|(i, gi)| gi * kind.derivative(xd[i], yd[i])).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).dims4("concat_channels")?;
                let sb = self.value(*b).dims4("concat_channels")?;
                let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut da = Vec::with_capacity(sa[0] * la);
                let mut db = Vec::with_capacity(sa[0] * lb);
                for chunk in g.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Slice { x, start } => {
                let [n, c, h, w] = self.value(*x).dims4("slice_channels")?;
                let plane = h * w;
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; n * c * plane];
                for s in 0..n {
                    let dst = (s * c + start) * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&g[s * len * plane..(s + 1) * len * plane]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Scale { x, factor } => {
                let dx = g.iter().map(|v| v * factor).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::WeightedSum { x, weights } => {
                let dx = weights.iter().map(|w| w * g[0]).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v / plane as f64, plane)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g),
            Op::Bce { x, target } => {
                let xd = self.value(*x).data();
                let k = g[0] / xd.len() as f64;
                let dx = xd.iter().zip(target).map(|(&z, &t)| k * (sigmoid(z) - t)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::L1 { x, target } => {
                let xd = self.value(*x).data();
                let k = g[0] / xd.len() as f64;
                let dx = xd
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            k
                        } else if d < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe { x, probs, target, pixel_weight } => {
                let [_, c, h, w] = self.value(*x).dims4("softmax_cross_entropy")?;
                let plane = h * w;
                let mut dx: Vec<f64> = probs.clone();
                for (i, v) in dx.iter_mut().enumerate() {
                    let s = i / (c * plane);
                    let ch = (i / plane) % c;
                    let p = i % plane;
                    let pix = s * plane + p;
                    let onehot = if target[pix] == ch { 1.0 } else { 0.0 };
                    *v = g[0] * pixel_weight[pix] * (*v - onehot);
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}
