use super::kernels::{self, ConvDims, ConvGeom};
use super::{shape_err, ParamId, ParamStore, Result, Tensor, TensorError};

/// Lower clamp applied to probabilities inside [`Graph::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

static EMPTY_STORE: ParamStore = ParamStore::empty();

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    ChannelBias { x: Var, b: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Embedding { table: Var, indices: Vec<usize> },
    Concat(Vec<Var>),
    Conv2d { x: Var, w: Var, dims: ConvDims, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, dims: ConvDims, geom: ConvGeom },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    LeakyRelu { x: Var, slope: f64 },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Bce { p: Var, labels: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::LeakyRelu { x, .. }
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x) => vec![*x],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ChannelBias { x, b } => vec![*x, *b],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat(parts) => parts.clone(),
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Bce { p, .. } => vec![*p],
        }
    }
}

struct Node {
    value: Value,
    requires_grad: bool,
    op: Op,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// A single-use tape of tensor operations.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied. Nodes
/// only ever reference earlier nodes, so the tape is a topological order.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    /// A graph with no parameter store; use [`Graph::leaf`] for trainable inputs.
    pub fn new() -> Self {
        Graph {
            store: &EMPTY_STORE,
            nodes: Vec::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|&v| self.requires(v));
        self.nodes.push(Node {
            value: Value::Owned(value),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push_param(id, true)
    }

    /// Parameter read without gradient tracking (e.g. the critic during a
    /// generator update).
    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        self.push_param(id, false)
    }

    fn push_param(&mut self, id: ParamId, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            requires_grad,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::Affine { x, scale }, "affine")
    }

    /// Adds `b[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 || self.shape(b) != [sx[1]] {
            return Err(shape_err(
                "channel_bias",
                format!("input {:?} vs bias {:?}", sx, self.shape(b)),
            ));
        }
        let channels = sx[1];
        let plane: usize = sx[2..].iter().product();
        let bias = self.value(b).data();
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[(i / plane) % channels])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::ChannelBias { x, b }, "channel_bias")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// `y = x W^T + b` with `x` viewed as `[N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        if tw.shape().len() != 2 || tx.shape().is_empty() {
            return Err(shape_err("linear", "weight must be 2-D, input at least 1-D"));
        }
        let (out_f, in_f) = (tw.shape()[0], tw.shape()[1]);
        let batch = tx.shape()[0];
        if batch == 0 || tx.len() != batch * in_f {
            return Err(shape_err(
                "linear",
                format!("input {:?} vs weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let mut y = vec![0.0; batch * out_f];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [out_f] {
                return Err(shape_err("linear", format!("bias {:?}", tb.shape())));
            }
            for row in y.chunks_mut(out_f) {
                row.copy_from_slice(tb.data());
            }
        }
        kernels::gemm(batch, in_f, out_f, 1.0, tx.data(), false, tw.data(), true, 1.0, &mut y);
        let out = Tensor::new(vec![batch, out_f], y)?;
        self.push(out, Op::Linear { x, w, b }, "linear")
    }

    /// Row lookup: `table: [V, D]` -> `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(shape_err("embedding", "table must be 2-D"));
        }
        let (vocab, dim) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(shape_err("embedding", format!("index {bad} >= vocab {vocab}")));
        }
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&tt.data()[i * dim..(i + 1) * dim]);
        }
        let out = Tensor::new(vec![indices.len(), dim], data)?;
        self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            "embedding",
        )
    }

    /// Concatenates `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?);
        if first.len() < 2 {
            return Err(shape_err("concat", "inputs must be at least 2-D"));
        }
        let batch = first[0];
        let tail = first[2..].to_vec();
        let plane: usize = tail.iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != batch || s[2..] != tail[..] {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, first)));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(batch * channels * plane);
        for n in 0..batch {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[1] * plane;
                data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        let mut shape = vec![batch, channels];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    fn conv_dims(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        geom: ConvGeom,
        transpose: bool,
    ) -> Result<ConvDims> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err(op, format!("input {sx:?}, weight {sw:?} must be 4-D")));
        }
        if sw[2] != geom.kernel || sw[3] != geom.kernel {
            return Err(shape_err(op, format!("weight {sw:?} vs kernel {}", geom.kernel)));
        }
        let (batch, in_channels, in_h, in_w) = (sx[0], sx[1], sx[2], sx[3]);
        let (w_in, out_channels) = if transpose { (sw[0], sw[1]) } else { (sw[1], sw[0]) };
        if w_in != in_channels {
            return Err(shape_err(op, format!("input {sx:?} vs weight {sw:?}")));
        }
        let out = |n| {
            if transpose {
                geom.transpose_out(n)
            } else {
                geom.conv_out(n)
            }
        };
        let (out_h, out_w) = match (out(in_h), out(in_w)) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(shape_err(
                    op,
                    format!("{in_h}x{in_w} incompatible with {geom:?}"),
                ))
            }
        };
        Ok(ConvDims {
            batch,
            in_channels,
            out_channels,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }

    /// `x: [N, C, H, W]`, `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let k = self.shape(w).get(2).copied().unwrap_or(0);
        let geom = ConvGeom::new(k, stride, padding);
        let dims = self.conv_dims("conv2d", x, w, geom, false)?;
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), dims, geom);
        let out = Tensor::new(vec![dims.batch, dims.out_channels, dims.out_h, dims.out_w], y)?;
        self.push(out, Op::Conv2d { x, w, dims, geom }, "conv2d")
    }

    /// `x: [N, C, H, W]`, `w: [C, O, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let k = self.shape(w).get(2).copied().unwrap_or(0);
        let geom = ConvGeom::new(k, stride, padding);
        let dims = self.conv_dims("conv_transpose2d", x, w, geom, true)?;
        let y = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            dims,
            geom,
        );
        let out = Tensor::new(vec![dims.batch, dims.out_channels, dims.out_h, dims.out_w], y)?;
        self.push(
            out,
            Op::ConvTranspose2d { x, w, dims, geom },
            "conv_transpose2d",
        )
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {sx:?}")));
        }
        let (batch, channels) = (sx[0], sx[1]);
        let plane: usize = sx[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(shape_err("batch_norm", "affine parameters must be [C]"));
        }
        Ok((batch, channels, plane))
    }

    /// Normalizes each channel with the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (batch, channels, plane) = self.bn_layout(x, gamma, beta)?;
        let count = batch * plane;
        let tx = self.value(x);
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                mean[c] += tx.data()[base..base + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                var[c] += tx.data()[base..base + plane]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut y = vec![0.0; tx.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                for i in base..base + plane {
                    xhat[i] = (tx.data()[i] - mean[c]) * inv_std[c];
                    y[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        let var_out = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm",
        )?;
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (batch, channels, plane) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(shape_err("batch_norm", "running statistics must be [C]"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let tx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![0.0; tx.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                for i in base..base + plane {
                    y[i] = g[c] * (tx.data()[i] - running_mean[c]) * inv_std[c] + b[c];
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            "batch_norm",
        )
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x, slope },
            "leaky_relu",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`, with
    /// `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        if tp.len() != labels.len() || labels.is_empty() {
            return Err(shape_err(
                "bce_loss",
                format!("{} probabilities vs {} labels", tp.len(), labels.len()),
            ));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| bce(p, y))
            .sum();
        let loss = total / labels.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            "bce_loss",
        )
    }

    /// Reverse pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(TensorError::GraphCycle { node: i });
            }
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.send(*a, g.clone(), grads);
                self.send(*b, g.clone(), grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(g, b)| g * b).collect();
                    self.send_data(*a, d, grads);
                }
                if self.requires(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(g, a)| g * a).collect();
                    self.send_data(*b, d, grads);
                }
            }
            Op::Affine { x, scale } => {
                self.send_data(*x, gd.iter().map(|g| g * scale).collect(), grads);
            }
            Op::ChannelBias { x, b } => {
                self.send(*x, g.clone(), grads);
                if self.requires(*b) {
                    let channels = self.shape(*b)[0];
                    let plane: usize = y.shape()[2..].iter().product();
                    let mut gb = vec![0.0; channels];
                    for (i, v) in gd.iter().enumerate() {
                        gb[(i / plane) % channels] += v;
                    }
                    self.send_data(*b, gb, grads);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.send_data(*x, vec![gd[0]; n], grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.send_data(*x, vec![gd[0] / n as f64; n], grads);
            }
            Op::Reshape(x) => self.send_data(*x, gd.to_vec(), grads),
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (out_f, in_f) = (tw.shape()[0], tw.shape()[1]);
                let batch = tx.shape()[0];
                if self.requires(*x) {
                    let mut gx = vec![0.0; batch * in_f];
                    kernels::gemm(batch, out_f, in_f, 1.0, gd, false, tw.data(), false, 0.0, &mut gx);
                    self.send_data(*x, gx, grads);
                }
                if self.requires(*w) {
                    let mut gw = vec![0.0; out_f * in_f];
                    kernels::gemm(out_f, batch, in_f, 1.0, gd, true, tx.data(), false, 0.0, &mut gw);
                    self.send_data(*w, gw, grads);
                }
                if let Some(b) = b {
                    if self.requires(*b) {
                        let mut gb = vec![0.0; out_f];
                        for row in gd.chunks(out_f) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.send_data(*b, gb, grads);
                    }
                }
            }
            Op::Embedding { table, indices } => {
                if self.requires(*table) {
                    let tt = self.value(*table);
                    let dim = tt.shape()[1];
                    let mut gt = vec![0.0; tt.len()];
                    for (row, &idx) in indices.iter().enumerate() {
                        for k in 0..dim {
                            gt[idx * dim + k] += gd[row * dim + k];
                        }
                    }
                    self.send_data(*table, gt, grads);
                }
            }
            Op::Concat(parts) => {
                let batch = y.shape()[0];
                let plane: usize = y.shape()[2..].iter().product();
                let total = y.shape()[1] * plane;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[1] * plane;
                    if self.requires(p) {
                        let mut gp = Vec::with_capacity(batch * len);
                        for n in 0..batch {
                            gp.extend_from_slice(&gd[n * total + offset..n * total + offset + len]);
                        }
                        self.send_data(p, gp, grads);
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, dims, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let mut gx = self.requires(*x).then(|| vec![0.0; tx.len()]);
                let mut gw = self.requires(*w).then(|| vec![0.0; tw.len()]);
                kernels::conv2d_backward(
                    tx.data(),
                    tw.data(),
                    gd,
                    *dims,
                    *geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.send_data(*x, gx, grads);
                }
                if let Some(gw) = gw {
                    self.send_data(*w, gw, grads);
                }
            }
            Op::ConvTranspose2d { x, w, dims, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let mut gx = self.requires(*x).then(|| vec![0.0; tx.len()]);
                let mut gw = self.requires(*w).then(|| vec![0.0; tw.len()]);
                kernels::conv_transpose2d_backward(
                    tx.data(),
                    tw.data(),
                    gd,
                    *dims,
                    *geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.send_data(*x, gx, grads);
                }
                if let Some(gw) = gw {
                    self.send_data(*w, gw, grads);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.shape(*x);
                let (batch, channels) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let count = (batch * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * plane;
                        for i in base..base + plane {
                            sum_g[c] += gd[i];
                            sum_gx[c] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.requires(*x) {
                    let mut gx = vec![0.0; gd.len()];
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * plane;
                            let k = gam[c] * inv_std[c] / count;
                            for i in base..base + plane {
                                gx[i] = k * (count * gd[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                            }
                        }
                    }
                    self.send_data(*x, gx, grads);
                }
                if self.requires(*gamma) {
                    self.send_data(*gamma, sum_gx, grads);
                }
                if self.requires(*beta) {
                    self.send_data(*beta, sum_g, grads);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let tx = self.value(*x);
                let shape = tx.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; gd.len()];
                let mut g_gamma = vec![0.0; channels];
                let mut g_beta = vec![0.0; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * plane;
                        for i in base..base + plane {
                            gx[i] = gd[i] * gam[c] * inv_std[c];
                            g_gamma[c] += gd[i] * (tx.data()[i] - mean[c]) * inv_std[c];
                            g_beta[c] += gd[i];
                        }
                    }
                }
                self.send_data(*x, gx, grads);
                self.send_data(*gamma, g_gamma, grads);
                self.send_data(*beta, g_beta, grads);
            }
            Op::LeakyRelu { x, slope } => {
                let tx = self.value(*x);
                let d = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                    .collect();
                self.send_data(*x, d, grads);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.send_data(*x, d, grads);
            }
            Op::Tanh(x) => {
                let d = gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.send_data(*x, d, grads);
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.send_data(*x, d, grads);
            }
            Op::Bce { p, labels } => {
                let tp = self.value(*p);
                let n = labels.len() as f64;
                let d = tp
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        gd[0] * (-y / pc + (1.0 - y) / (1.0 - pc)) / n
                    })
                    .collect();
                self.send_data(*p, d, grads);
            }
        }
    }

    fn send_data(&self, to: Var, data: Vec<f64>, grads: &mut [Option<Tensor>]) {
        let shape = self.shape(to).to_vec();
        self.send(to, Tensor { shape, data }, grads);
    }

    fn send(&self, to: Var, g: Tensor, grads: &mut [Option<Tensor>]) {
        if !self.requires(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reachable and tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every tracked parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn bce(p: f64, label: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln())
}
