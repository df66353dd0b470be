//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Operations
//! are appended in execution order, so node indices are already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{config_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-accumulate counts, tallied per op family as ops are recorded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub matmul_macs: u64,
    pub conv_macs: u64,
    pub linear_macs: u64,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormOptions {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        Self { momentum: 0.1, eps: 1e-5 }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Linear { input: Var, weight: Var, bias: Option<Var>, rows: usize, d_in: usize, d_out: usize },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Permute { input: Var, perm: Vec<usize> },
    Reshape { input: Var },
    Concat { inputs: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Mean { input: Var, outer: usize, len: usize, inner: usize },
    Sum { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Gelu { input: Var },
    Softmax { input: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, mode: NormMode },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Gather { table: Var, index: Vec<usize>, rows: usize, cols: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward record plus adjoint replay.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    counters: OpCounters,
    gelu_grad_fault: Option<f64>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact-erf GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    /// Scales every GELU adjoint by `factor`. Only for exercising gradient
    /// checkers against a known-broken backward pass.
    #[doc(hidden)]
    pub fn inject_gelu_grad_fault(&mut self, factor: f64) {
        self.gelu_grad_fault = Some(factor);
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        id
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = true;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.grad.is_some() {
                node.value.zero_grad();
            }
        }
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{} produced non-finite value {} at element {i}",
                op.name(),
                data[i]
            )));
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_grouped(input, weight, bias, stride, padding, 1)
    }

    /// Per-channel convolution; `weight` is `[C,1,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let c = self.shape(input).get(1).copied().unwrap_or(0);
        self.conv2d_grouped(input, weight, None, stride, padding, c.max(1))
    }

    pub fn conv2d_grouped(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return config_err(format!("conv2d wants 4-d input and weight, got {xs:?} and {ws:?}"));
        }
        if stride == 0 || groups == 0 {
            return config_err("conv2d stride and groups must be positive");
        }
        let [batch, c_in, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let [c_out, cig, kh, kw] = [ws[0], ws[1], ws[2], ws[3]];
        if c_in % groups != 0 || c_out % groups != 0 || cig * groups != c_in {
            return config_err(format!(
                "conv2d channel mismatch: input has {c_in} channels, weight {ws:?}, groups {groups}"
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return config_err(format!("conv2d bias must be [{c_out}], got {:?}", self.shape(b)));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return config_err(format!(
                "conv2d output extent is non-positive for input {h}x{w}, kernel {kh}x{kw}, padding {padding}"
            ));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            groups,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        self.counters.conv_macs += geom.macs();
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(vec![batch, c_out, geom.h_out, geom.w_out], data, Op::Conv2d { input, weight, bias, geom }, &inputs)
    }

    /// `input·weightᵀ + bias` over the last axis; `weight` is `[d_out, d_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let d_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != d_in {
            return config_err(format!("linear weight {ws:?} does not accept input {xs:?}"));
        }
        let d_out = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return config_err(format!("linear bias must be [{d_out}], got {:?}", self.shape(b)));
            }
        }
        let rows = xs[..xs.len() - 1].iter().product::<usize>();
        let mut data = match bias {
            Some(b) => self.value(b).data().repeat(rows),
            None => vec![0.0; rows * d_out],
        };
        kernels::gemm(rows, d_in, d_out, self.value(input).data(), false, self.value(weight).data(), true, 1.0, &mut data);
        self.counters.linear_macs += (rows * d_in * d_out) as u64;
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = d_out;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(shape, data, Op::Linear { input, weight, bias, rows, d_in, d_out }, &inputs)
    }

    /// Batched matrix product over identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let nd = as_.len();
        if nd < 2 || bs.len() != nd || as_[..nd - 2] != bs[..nd - 2] || as_[nd - 1] != bs[nd - 2] {
            return config_err(format!("matmul shapes {as_:?} and {bs:?} are incompatible"));
        }
        let (m, k, n) = (as_[nd - 2], as_[nd - 1], bs[nd - 1]);
        let batch: usize = as_[..nd - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(m, k, n, &ad[i * m * k..], false, &bd[i * k * n..], false, 0.0, &mut data[i * m * n..(i + 1) * m * n]);
            }
        }
        self.counters.matmul_macs += (batch * m * k * n) as u64;
        let mut shape = as_;
        shape[nd - 1] = n;
        self.push(shape, data, Op::MatMul { a, b, batch, m, k, n }, &[a, b])
    }

    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return config_err(format!("{perm:?} is not a permutation of {} axes", shape.len()));
        }
        let data = kernels::permute(self.value(input).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(out_shape, data, Op::Permute { input, perm: perm.to_vec() }, &[input])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let nd = self.shape(input).len();
        if nd < 2 {
            return config_err("transpose needs at least two axes");
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(input, &perm)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return config_err(format!("cannot reshape {:?} into {shape:?}", self.shape(input)));
        }
        let data = self.value(input).data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape { input }, &[input])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return config_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return config_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return config_err(format!("concat shapes {base:?} and {s:?} disagree off axis {axis}"));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(shape, data, Op::Concat { inputs: inputs.to_vec(), outer, inner, lens }, inputs)
    }

    /// Mean over one axis, which is removed from the result.
    pub fn mean(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return config_err(format!("mean axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(input).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                data[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        data.iter_mut().for_each(|d| *d /= len as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(out_shape, data, Op::Mean { input, outer, len, inner }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum { input }, &[input])
    }

    /// Elementwise `a + b`, where `b`'s shape may be any suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if bs.len() > as_.len() || as_[as_.len() - bs.len()..] != *bs {
            return config_err(format!("cannot broadcast {bs:?} onto {as_:?}"));
        }
        let shape = as_.to_vec();
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        self.push(shape, data, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return config_err(format!("mul shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), data, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let data = self.value(input).data().iter().map(|x| x * factor).collect();
        self.push(self.shape(input).to_vec(), data, Op::Scale { input, factor }, &[input])
    }

    pub fn gelu(&mut self, input: Var) -> Result<Var> {
        let data = self.value(input).data().iter().map(|&x| gelu_scalar(x)).collect();
        self.push(self.shape(input).to_vec(), data, Op::Gelu { input }, &[input])
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return config_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(input).data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    data[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[at(l)] /= z;
                }
            }
        }
        self.push(shape, data, Op::Softmax { input, outer, len, inner }, &[input])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return config_err(format!("layer_norm affine params must be [{d}]"));
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + b[j];
            }
        }
        self.push(shape, data, Op::LayerNorm { input, gamma, beta, xhat, rstd }, &[input, gamma, beta])
    }

    /// Per-channel normalization of `[N,C,H,W]`. In train mode the batch
    /// statistics are used and folded into `stats`; in eval mode `stats`
    /// is read only.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: NormMode,
        opts: BatchNormOptions,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return config_err(format!("batch_norm wants [N,C,H,W], got {shape:?}"));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return config_err(format!("batch_norm parameters must all have {c} channels"));
        }
        let count = n * hw;
        if mode == NormMode::Train && count == 1 {
            return config_err("batch_norm in train mode needs more than one value per channel");
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; c];
        let mut data = vec![0.0; x.len()];
        for ch in 0..c {
            let planes = (0..n).map(|s| (s * c + ch) * hw);
            let (mean, var) = match mode {
                NormMode::Train => {
                    let mean = planes.clone().flat_map(|o| &x[o..o + hw]).sum::<f64>() / count as f64;
                    let var = planes.clone().flat_map(|o| &x[o..o + hw]).map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / count as f64;
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    stats.mean[ch] = (1.0 - opts.momentum) * stats.mean[ch] + opts.momentum * mean;
                    stats.var[ch] = (1.0 - opts.momentum) * stats.var[ch] + opts.momentum * unbiased;
                    (mean, var)
                }
                NormMode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let rs = 1.0 / (var + opts.eps).sqrt();
            rstd[ch] = rs;
            for o in planes {
                for i in o..o + hw {
                    let xh = (x[i] - mean) * rs;
                    xhat[i] = xh;
                    data[i] = xh * g[ch] + b[ch];
                }
            }
        }
        self.push(shape, data, Op::BatchNorm { input, gamma, beta, xhat, rstd, mode }, &[input, gamma, beta])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return config_err(format!("cross_entropy wants [N,K] logits for {} labels, got {shape:?}", labels.len()));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return config_err(format!("label {bad} out of range for {k} classes"));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        loss /= n as f64;
        self.push(Vec::new(), vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    /// `out[r, ..] = table[r, index[..]]` for a `[rows, cols]` table; the
    /// result has shape `[rows] ++ index_shape`.
    pub fn gather(&mut self, table: Var, index: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || index_shape.iter().product::<usize>() != index.len() {
            return config_err(format!("gather wants a 2-d table and matching index, got {ts:?}"));
        }
        let (rows, cols) = (ts[0], ts[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return config_err(format!("gather index {bad} out of range for {cols} columns"));
        }
        let t = self.value(table).data();
        let data = (0..rows).flat_map(|r| index.iter().map(move |&i| t[r * cols + i])).collect();
        let mut shape = vec![rows];
        shape.extend_from_slice(index_shape);
        self.push(shape, data, Op::Gather { table, index: index.to_vec(), rows, cols }, &[table])
    }

    /// Propagates adjoints from a scalar `loss` into every leaf that
    /// requires a gradient. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward from non-scalar of shape {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numerical(format!("backward from non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            for (input, delta) in self.adjoints(i, &g) {
                if self.requires_grad(input) {
                    add_into(&mut grads[input.0], &delta);
                }
            }
        }
        Ok(())
    }

    fn adjoints(&self, node: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[node].value.data();
        match &self.nodes[node].op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(geom, val(*input), val(*weight), dy);
                let mut res = vec![(*input, dx), (*weight, dw)];
                if let Some(b) = bias {
                    res.push((*b, db));
                }
                res
            }
            Op::Linear { input, weight, bias, rows, d_in, d_out } => {
                let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
                let mut dx = vec![0.0; rows * d_in];
                kernels::gemm(rows, d_out, d_in, dy, false, val(*weight), false, 0.0, &mut dx);
                let mut dw = vec![0.0; d_out * d_in];
                kernels::gemm(d_out, rows, d_in, dy, true, val(*input), false, 0.0, &mut dw);
                let mut res = vec![(*input, dx), (*weight, dw)];
                if let Some(b) = bias {
                    let mut db = vec![0.0; d_out];
                    for row in dy.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                let (ad, bd) = (val(*a), val(*b));
                for i in 0..*batch {
                    let dyi = &dy[i * m * n..];
                    kernels::gemm(m, n, k, dyi, false, &bd[i * k * n..], true, 0.0, &mut da[i * m * k..(i + 1) * m * k]);
                    kernels::gemm(k, m, n, &ad[i * m * k..], true, dyi, false, 0.0, &mut db[i * k * n..(i + 1) * k * n]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Permute { input, perm } => {
                let out_shape = self.nodes[node].value.shape();
                vec![(*input, kernels::permute(dy, out_shape, &kernels::inverse_permutation(perm)))]
            }
            Op::Reshape { input } => vec![(*input, dy.to_vec())],
            Op::Concat { inputs, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                inputs
                    .iter()
                    .zip(lens)
                    .map(|(&v, &len)| {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&dy[start..start + len * inner]);
                        }
                        offset += len;
                        (v, d)
                    })
                    .collect()
            }
            Op::Mean { input, outer, len, inner } => {
                let scale = 1.0 / *len as f64;
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..*outer {
                    for _ in 0..*len {
                        dx.extend(dy[o * inner..(o + 1) * inner].iter().map(|g| g * scale));
                    }
                }
                vec![(*input, dx)]
            }
            Op::Sum { input } => vec![(*input, vec![dy[0]; self.nodes[input.0].value.numel()])],
            Op::Add { a, b } => {
                let bl = self.nodes[b.0].value.numel();
                let mut db = vec![0.0; bl];
                for row in dy.chunks(bl) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                vec![(*a, dy.to_vec()), (*b, db)]
            }
            Op::Mul { a, b } => {
                let da = dy.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db = dy.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { input, factor } => vec![(*input, dy.iter().map(|g| g * factor).collect())],
            Op::Gelu { input } => {
                let fault = self.gelu_grad_fault.unwrap_or(1.0);
                let dx = dy.iter().zip(val(*input)).map(|(g, &x)| g * gelu_grad_scalar(x) * fault).collect();
                vec![(*input, dx)]
            }
            Op::Softmax { input, outer, len, inner } => {
                let (len, inner) = (*len, *inner);
                let mut dx = vec![0.0; dy.len()];
                for o in 0..*outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| dy[at(l)] * out[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = out[at(l)] * (dy[at(l)] - dot);
                        }
                    }
                }
                vec![(*input, dx)]
            }
            Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
                let g = val(*gamma);
                let d = g.len();
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (dyr, xh) = (&dy[span.clone()], &xhat[span.clone()]);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = dyr[j] * g[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        dg[j] += dyr[j] * xh[j];
                        db[j] += dyr[j];
                    }
                    let (m1, m2) = (sum_dxh / d as f64, sum_dxh_xh / d as f64);
                    for j in 0..d {
                        dx[r * d + j] = rs * (dyr[j] * g[j] - m1 - xh[j] * m2);
                    }
                }
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::BatchNorm { input, gamma, beta, xhat, rstd, mode } => {
                let shape = self.nodes[input.0].value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let g = val(*gamma);
                let count = (n * hw) as f64;
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let planes = || (0..n).map(move |s| (s * c + ch) * hw).flat_map(move |o| o..o + hw);
                    for i in planes() {
                        dg[ch] += dy[i] * xhat[i];
                        db[ch] += dy[i];
                    }
                    let rs = rstd[ch];
                    match mode {
                        NormMode::Eval => planes().for_each(|i| dx[i] = dy[i] * g[ch] * rs),
                        NormMode::Train => {
                            let (m1, m2) = (db[ch] * g[ch] / count, dg[ch] * g[ch] / count);
                            planes().for_each(|i| dx[i] = rs * (dy[i] * g[ch] - m1 - xhat[i] * m2));
                        }
                    }
                }
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / n as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= scale;
                }
                vec![(*logits, dx)]
            }
            Op::Gather { table, index, rows, cols } => {
                let mut dt = vec![0.0; rows * cols];
                let m = index.len();
                for r in 0..*rows {
                    for (j, &i) in index.iter().enumerate() {
                        dt[r * cols + i] += dy[r * m + j];
                    }
                }
                vec![(*table, dt)]
            }
        }
    }
}
