use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axis of an `(L × D)` matrix an [`Graph::affine`] map contracts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// `w` is `L × L'` and is applied as `wᵀ · x`, shared across channels.
    Time,
    /// `w` is `D × D'` and is applied as `x · w`, shared across time steps.
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Min,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    ScaleShift {
        x: Var,
        scale: f64,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        axis: Axis,
    },
    Conv1d {
        x: Var,
        kernels: Var,
        stride: usize,
    },
    /// Flat source index in `x` of every output element.
    PoolSelect {
        x: Var,
        source: Vec<usize>,
    },
    PoolAvg {
        x: Var,
        k: usize,
        stride: usize,
    },
    PadReplicate {
        x: Var,
        extra: usize,
    },
    Stack {
        inputs: Vec<Var>,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Reshape(Var),
    WeightedSum {
        x: Var,
        axis: usize,
        w: Var,
        bias: Option<Var>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Abs(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::ScaleShift { x, .. }
            | Op::PoolSelect { x, .. }
            | Op::PoolAvg { x, .. }
            | Op::PadReplicate { x, .. }
            | Op::Narrow { x, .. }
            | Op::Select { x, .. }
            | Op::Dropout { x, .. } => f(*x),
            Op::Affine { x, w, b, .. } => {
                f(*x);
                f(*w);
                if let Some(b) = b {
                    f(*b);
                }
            }
            Op::Conv1d { x, kernels, .. } => {
                f(*x);
                f(*kernels);
            }
            Op::Stack { inputs, .. } | Op::Concat { inputs, .. } => {
                inputs.iter().copied().for_each(f);
            }
            Op::WeightedSum { x, w, bias, .. } => {
                f(*x);
                f(*w);
                if let Some(b) = bias {
                    f(*b);
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so every operation's inputs precede it.
/// Gradients are only tracked for nodes that (transitively) depend on a
/// [`Graph::param`] leaf.
///
/// `backward` may run once per graph. A second call returns
/// [`TensorError::BackwardAlreadyRun`] unless [`Graph::zero_grad`] ran in between;
/// gradients never silently accumulate across calls.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    training: bool,
    rng: Option<ChaCha8Rng>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: false,
            rng: None,
            backward_done: false,
        }
    }

    /// A graph in training mode whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
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

    /// Gradient of the last backward pass. `None` for nodes that do not track
    /// gradients or before `backward` ran.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Input handles of the operation that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        let mut out = Vec::new();
        self.nodes[v.0].op.for_each_input(|i| out.push(i));
        out
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let mut requires_grad = false;
        let mut inputs_finite = true;
        op.for_each_input(|i| {
            let node = &self.nodes[i.0];
            requires_grad |= node.requires_grad;
            if cfg!(debug_assertions) {
                inputs_finite &= node.value.is_finite();
            }
        });
        debug_assert!(
            !inputs_finite || value.is_finite(),
            "non-finite output from finite inputs in {op:?}"
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                reason: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Forward operations
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.value(a).values(),
            self.value(b).values(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let (x, y) = (self.value(a), self.value(b));
        let values = x
            .values()
            .iter()
            .zip(y.values())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x))
    }

    /// `scale · x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::ScaleShift { x, scale })
    }

    /// Linear map over one axis of an `(L × D)` matrix, with an optional bias
    /// spread along the axis that is not contracted.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>, axis: Axis) -> Result<Var> {
        let (l, d) = self.matrix_dims(x, "affine")?;
        let (wr, wc) = self.matrix_dims(w, "affine")?;
        let contracted = match axis {
            Axis::Time => l,
            Axis::Feature => d,
        };
        if wr != contracted {
            return Err(TensorError::Shape {
                op: "affine",
                lhs: vec![l, d],
                rhs: vec![wr, wc],
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [wc] {
                return Err(TensorError::Shape {
                    op: "affine bias",
                    lhs: vec![wc],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let (shape, out) = match axis {
            Axis::Feature => {
                let mut out = vec![0.0; l * wc];
                if let Some(b) = b {
                    let bv = self.value(b).values();
                    out.chunks_mut(wc).for_each(|row| row.copy_from_slice(bv));
                }
                gemm_nn(xv, wv, &mut out, l, d, wc);
                (vec![l, wc], out)
            }
            Axis::Time => {
                let mut out = vec![0.0; wc * d];
                if let Some(b) = b {
                    let bv = self.value(b).values();
                    for (row, &bj) in out.chunks_mut(d).zip(bv) {
                        row.fill(bj);
                    }
                }
                gemm_tn(wv, xv, &mut out, wc, l, d);
                (vec![wc, d], out)
            }
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Affine { x, w, b, axis }))
    }

    /// Depthwise 1-D convolution: kernel column `d` slides over channel `d` only.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (l, d) = self.matrix_dims(x, "conv1d")?;
        let (k, kd) = self.matrix_dims(kernels, "conv1d")?;
        if kd != d {
            return Err(TensorError::Shape {
                op: "conv1d",
                lhs: vec![l, d],
                rhs: vec![k, kd],
            });
        }
        let out_len = window_count(l, k, stride, "conv1d")?;
        let xv = self.value(x).values();
        let kv = self.value(kernels).values();
        let mut out = vec![0.0; out_len * d];
        for t in 0..out_len {
            for j in 0..k {
                let src = &xv[(t * stride + j) * d..(t * stride + j + 1) * d];
                let kr = &kv[j * d..(j + 1) * d];
                for c in 0..d {
                    out[t * d + c] += kr[c] * src[c];
                }
            }
        }
        let value = Tensor::new(vec![out_len, d], out)?;
        Ok(self.push(value, Op::Conv1d { x, kernels, stride }))
    }

    /// Windowed per-channel reduction. Max/min route the gradient to the first
    /// extremal position in each window.
    pub fn pool1d(&mut self, mode: PoolMode, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (l, d) = self.matrix_dims(x, "pool1d")?;
        let out_len = window_count(l, k, stride, "pool1d")?;
        let xv = self.value(x).values();
        let mut out = vec![0.0; out_len * d];
        match mode {
            PoolMode::Avg => {
                for t in 0..out_len {
                    for c in 0..d {
                        let s: f64 = (0..k).map(|j| xv[(t * stride + j) * d + c]).sum();
                        out[t * d + c] = s / k as f64;
                    }
                }
                let value = Tensor::new(vec![out_len, d], out)?;
                Ok(self.push(value, Op::PoolAvg { x, k, stride }))
            }
            PoolMode::Max | PoolMode::Min => {
                let better = |cand: f64, best: f64| match mode {
                    PoolMode::Max => cand > best,
                    _ => cand < best,
                };
                let mut source = vec![0usize; out_len * d];
                for t in 0..out_len {
                    for c in 0..d {
                        let mut best_idx = t * stride * d + c;
                        for j in 1..k {
                            let idx = (t * stride + j) * d + c;
                            if better(xv[idx], xv[best_idx]) {
                                best_idx = idx;
                            }
                        }
                        source[t * d + c] = best_idx;
                        out[t * d + c] = xv[best_idx];
                    }
                }
                let value = Tensor::new(vec![out_len, d], out)?;
                Ok(self.push(value, Op::PoolSelect { x, source }))
            }
        }
    }

    /// Appends `extra` copies of the last row of a matrix.
    pub fn pad_replicate(&mut self, x: Var, extra: usize) -> Result<Var> {
        let (l, d) = self.matrix_dims(x, "pad_replicate")?;
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity((l + extra) * d);
        out.extend_from_slice(xv);
        for _ in 0..extra {
            out.extend_from_slice(&xv[(l - 1) * d..]);
        }
        let value = Tensor::new(vec![l + extra, d], out)?;
        Ok(self.push(value, Op::PadReplicate { x, extra }))
    }

    /// Stacks equal-shape tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::Invalid {
            op: "stack",
            reason: "empty input list".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis > base.len() {
            return Err(TensorError::Invalid {
                op: "stack",
                reason: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        for &v in &inputs[1..] {
            self.same_shape(first, v, "stack")?;
        }
        let n = inputs.len();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let mut out = vec![0.0; outer * n * inner];
        for (i, &v) in inputs.iter().enumerate() {
            let src = self.value(v).values();
            for o in 0..outer {
                out[(o * n + i) * inner..(o * n + i + 1) * inner]
                    .copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Concatenates tensors along an existing axis.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            reason: "empty input list".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let src = self.value(v).values();
                out.extend_from_slice(&src[o * ext * tail..(o + 1) * ext * tail]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                reason: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let tail: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(outer * len * tail);
        for o in 0..outer {
            let base = (o * ext + start) * tail;
            out.extend_from_slice(&src[base..base + len * tail]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    /// Picks one index along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(TensorError::Invalid {
                op: "select",
                reason: format!("index {index} on axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let tail: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(outer * tail);
        for o in 0..outer {
            let base = (o * ext + index) * tail;
            out.extend_from_slice(&src[base..base + tail]);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Select { x, axis, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Weighted sum over `axis`: `out[.., r] = Σ_i w[i, ..] · x[.., i, r] (+ bias)`.
    ///
    /// `w` indexes the contracted axis and optionally the axes immediately after
    /// it; it is shared over every remaining axis. `bias` is a one-element tensor.
    pub fn weighted_sum(&mut self, x: Var, axis: usize, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fits = axis + ws.len() <= shape.len() && shape[axis..axis + ws.len()] == ws[..];
        if !fits {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                lhs: shape,
                rhs: ws,
            });
        }
        if let Some(b) = bias {
            if self.value(b).len() != 1 {
                return Err(TensorError::Shape {
                    op: "weighted_sum bias",
                    lhs: vec![1],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let rest: usize = shape[axis + ws.len()..].iter().product();
        let wtail = inner / rest;
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let b0 = bias.map(|b| self.value(b).values()[0]).unwrap_or(0.0);
        let mut out = vec![b0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv[(o * n + i) * inner..(o * n + i + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (r, (dv, &sv)) in dst.iter_mut().zip(src).enumerate() {
                    *dv += wv[i * wtail + r / rest] * sv;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::WeightedSum { x, axis, w, bias }))
    }

    /// Inverted dropout. The identity outside training mode or when `p == 0`.
    pub fn dropout_with<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = {
            let xv = self.value(x);
            let values = xv.values().iter().zip(&mask).map(|(a, m)| a * m).collect();
            Tensor::new(xv.shape().to_vec(), values)?
        };
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Dropout driven by the graph's own mode and generator.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let training = self.training;
        match self.rng.take() {
            Some(mut rng) => {
                let out = self.dropout_with(x, p, training, &mut rng);
                self.rng = Some(rng);
                out
            }
            None => self.dropout_with(x, p, false, &mut rand::rng()),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.values().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Populates `∂loss/∂v` for every node that tracks gradients. Parameters
    /// the loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        }

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, node, &g);
        }

        for (node, grad) in nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
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

fn window_count(len: usize, k: usize, stride: usize, op: &'static str) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op,
            reason: format!("window {k} and stride {stride} must be positive"),
        });
    }
    if len < k {
        return Err(TensorError::Shape {
            op,
            lhs: vec![len],
            rhs: vec![k],
        });
    }
    Ok((len - k) / stride + 1)
}

/// Gradient accumulator for `v`, or `None` if `v` does not track gradients.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()))
            .values_mut(),
    )
}

fn propagate(nodes: &[Node], grads: &mut [Option<Tensor>], node: &Node, g: &Tensor) {
    let gv = g.values();
    let val = |v: Var| nodes[v.0].value.values();
    let shp = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            if let Some(da) = slot(nodes, grads, *a) {
                gemm_nt(gv, val(*b), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm_tn(val(*a), gv, db, k, m, n);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(gv).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(gv).for_each(|(x, y)| *x += y);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(gv).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((x, y), o) in d.iter_mut().zip(gv).zip(val(*b)) {
                    *x += y * o;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((x, y), o) in d.iter_mut().zip(gv).zip(val(*a)) {
                    *x += y * o;
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                for ((dx, y), s) in d.iter_mut().zip(gv).zip(node.value.values()) {
                    *dx += y * s * (1.0 - s);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                for ((dx, y), t) in d.iter_mut().zip(gv).zip(node.value.values()) {
                    *dx += y * (1.0 - t * t);
                }
            }
        }
        Op::Abs(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                for ((dx, y), xv) in d.iter_mut().zip(gv).zip(val(*x)) {
                    let sign = if *xv > 0.0 {
                        1.0
                    } else if *xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *dx += y * sign;
                }
            }
        }
        Op::ScaleShift { x, scale } => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(gv).for_each(|(dx, y)| *dx += scale * y);
            }
        }
        Op::Affine { x, w, b, axis } => {
            let (l, dim) = (shp(*x)[0], shp(*x)[1]);
            let wc = shp(*w)[1];
            match axis {
                Axis::Feature => {
                    // y (l×wc) = x (l×dim) · w (dim×wc) + b
                    if let Some(dx) = slot(nodes, grads, *x) {
                        gemm_nt(gv, val(*w), dx, l, wc, dim);
                    }
                    if let Some(dw) = slot(nodes, grads, *w) {
                        gemm_tn(val(*x), gv, dw, dim, l, wc);
                    }
                    if let Some(db) = b.and_then(|b| slot(nodes, grads, b)) {
                        for row in gv.chunks(wc) {
                            db.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                        }
                    }
                }
                Axis::Time => {
                    // y (wc×dim) = wᵀ · x, w is l×wc
                    if let Some(dx) = slot(nodes, grads, *x) {
                        gemm_nn(val(*w), gv, dx, l, wc, dim);
                    }
                    if let Some(dw) = slot(nodes, grads, *w) {
                        gemm_nt(val(*x), gv, dw, l, dim, wc);
                    }
                    if let Some(db) = b.and_then(|b| slot(nodes, grads, b)) {
                        for (a, row) in db.iter_mut().zip(gv.chunks(dim)) {
                            *a += row.iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        Op::Conv1d { x, kernels, stride } => {
            let d = shp(*x)[1];
            let k = shp(*kernels)[0];
            let out_len = node.value.shape()[0];
            if let Some(dx) = slot(nodes, grads, *x) {
                let kv = val(*kernels);
                for t in 0..out_len {
                    for j in 0..k {
                        for c in 0..d {
                            dx[(t * stride + j) * d + c] += kv[j * d + c] * gv[t * d + c];
                        }
                    }
                }
            }
            if let Some(dk) = slot(nodes, grads, *kernels) {
                let xv = val(*x);
                for t in 0..out_len {
                    for j in 0..k {
                        for c in 0..d {
                            dk[j * d + c] += xv[(t * stride + j) * d + c] * gv[t * d + c];
                        }
                    }
                }
            }
        }
        Op::PoolSelect { x, source } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&src, y) in source.iter().zip(gv) {
                    dx[src] += y;
                }
            }
        }
        Op::PoolAvg { x, k, stride } => {
            let d = shp(*x)[1];
            let out_len = node.value.shape()[0];
            if let Some(dx) = slot(nodes, grads, *x) {
                let share = 1.0 / *k as f64;
                for t in 0..out_len {
                    for j in 0..*k {
                        for c in 0..d {
                            dx[(t * stride + j) * d + c] += share * gv[t * d + c];
                        }
                    }
                }
            }
        }
        Op::PadReplicate { x, extra } => {
            let (l, d) = (shp(*x)[0], shp(*x)[1]);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (a, y) in dx.iter_mut().zip(&gv[..l * d]) {
                    *a += y;
                }
                for e in 0..*extra {
                    let row = &gv[(l + e) * d..(l + e + 1) * d];
                    for (a, y) in dx[(l - 1) * d..].iter_mut().zip(row) {
                        *a += y;
                    }
                }
            }
        }
        Op::Stack { inputs, axis } => {
            let n = inputs.len();
            let base = shp(inputs[0]);
            let outer: usize = base[..*axis].iter().product();
            let inner: usize = base[*axis..].iter().product();
            for (i, &v) in inputs.iter().enumerate() {
                if let Some(d) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &gv[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (a, y) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *a += y;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let tail: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &v in inputs {
                let ext = shp(v)[*axis];
                if let Some(d) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src =
                            &gv[(o * total + offset) * tail..(o * total + offset + ext) * tail];
                        for (a, y) in d[o * ext * tail..(o + 1) * ext * tail].iter_mut().zip(src) {
                            *a += y;
                        }
                    }
                }
                offset += ext;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = shp(*x);
            let outer: usize = in_shape[..*axis].iter().product();
            let tail: usize = in_shape[*axis + 1..].iter().product();
            let ext = in_shape[*axis];
            let len = node.value.shape()[*axis];
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let base = (o * ext + start) * tail;
                    let src = &gv[o * len * tail..(o + 1) * len * tail];
                    for (a, y) in dx[base..base + len * tail].iter_mut().zip(src) {
                        *a += y;
                    }
                }
            }
        }
        Op::Select { x, axis, index } => {
            let in_shape = shp(*x);
            let outer: usize = in_shape[..*axis].iter().product();
            let tail: usize = in_shape[*axis + 1..].iter().product();
            let ext = in_shape[*axis];
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let base = (o * ext + index) * tail;
                    for (a, y) in dx[base..base + tail]
                        .iter_mut()
                        .zip(&gv[o * tail..(o + 1) * tail])
                    {
                        *a += y;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(gv).for_each(|(a, y)| *a += y);
            }
        }
        Op::WeightedSum { x, axis, w, bias } => {
            let shape = shp(*x);
            let ws_len = shp(*w).len();
            let outer: usize = shape[..*axis].iter().product();
            let n = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let rest: usize = shape[*axis + ws_len..].iter().product();
            let wtail = inner / rest;
            if let Some(dx) = slot(nodes, grads, *x) {
                let wv = val(*w);
                for o in 0..outer {
                    for i in 0..n {
                        let dst = &mut dx[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (r, a) in dst.iter_mut().enumerate() {
                            *a += wv[i * wtail + r / rest] * gv[o * inner + r];
                        }
                    }
                }
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                let xv = val(*x);
                for o in 0..outer {
                    for i in 0..n {
                        for r in 0..inner {
                            dw[i * wtail + r / rest] +=
                                xv[(o * n + i) * inner + r] * gv[o * inner + r];
                        }
                    }
                }
            }
            if let Some(db) = bias.and_then(|b| slot(nodes, grads, b)) {
                db[0] += gv.iter().sum::<f64>();
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((a, y), m) in dx.iter_mut().zip(gv).zip(mask) {
                    *a += y * m;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|a| *a += gv[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let share = gv[0] / dx.len() as f64;
                dx.iter_mut().for_each(|a| *a += share);
            }
        }
    }
}
