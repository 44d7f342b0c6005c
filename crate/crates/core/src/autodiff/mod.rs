//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every op applied to its [`Var`]s. Parameters enter as
//! leaves, intermediate activations can be exposed as [`FeatureTap`]s, and a
//! single [`Tape::backward`] call produces gradients for every leaf together
//! with the gradient at each requested tap.

mod kernels;

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor, TensorError};

use kernels::ConvDims;
pub use kernels::NORM_EPS;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);
static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Allows conv/matmul kernels to split independent output rows across
/// threads. Reductions stay sequential either way; `false` (the default)
/// keeps everything on the calling thread.
pub fn set_parallel_kernels(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub(crate) fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Conv2d,
    Add,
    AddBias,
    Sub,
    Mul,
    Scale,
    Square,
    Relu,
    AvgPool2,
    Reshape,
    NormalizeLast,
    SoftmaxLast,
    Log,
    Exp,
    Sum,
    Mean,
    SumLast,
    SelectRows,
    ChannelSum,
    WeightedSum,
    LscLoss,
}

impl OpKind {
    /// Every differentiable op, in declaration order.
    pub const DIFFERENTIABLE: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Square,
        OpKind::Relu,
        OpKind::AvgPool2,
        OpKind::Reshape,
        OpKind::NormalizeLast,
        OpKind::SoftmaxLast,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumLast,
        OpKind::SelectRows,
        OpKind::ChannelSum,
        OpKind::WeightedSum,
        OpKind::LscLoss,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?} ({detail})")]
    ShapeMismatch {
        op: OpKind,
        shapes: Vec<Vec<usize>>,
        detail: &'static str,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("feature tap for layer {0} is not on this tape")]
    TapNotOnTape(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// An intermediate activation of shape (batch, channels, spatial) exposed
/// for distillation, with the gradient captured during backward.
#[derive(Debug, Clone)]
pub struct FeatureTap<S> {
    pub layer_id: usize,
    pub var: Var,
    pub value: Tensor<S>,
    pub grad_slot: Option<Tensor<S>>,
}

impl<S: Scalar> FeatureTap<S> {
    pub fn batch(&self) -> usize {
        self.value.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.value.shape()[1]
    }

    pub fn spatial(&self) -> usize {
        self.value.shape()[2]
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        dims: ConvDims,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        k: S,
    },
    Square {
        x: usize,
    },
    Relu {
        x: usize,
    },
    AvgPool2 {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    NormalizeLast {
        x: usize,
        norms: Vec<S>,
    },
    SoftmaxLast {
        x: usize,
    },
    Log {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    SumLast {
        x: usize,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    ChannelSum {
        x: usize,
    },
    WeightedSum {
        x: usize,
        w: Vec<S>,
    },
    LscLoss {
        logits: usize,
        eta: usize,
        labels: Vec<usize>,
        margin: S,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of operations. Node `i` only ever reads nodes `< i`, so
/// the insertion order is a topological order.
#[derive(Debug)]
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `var`, `None` if `var` does not
    /// require grad or is not on the differentiated tape.
    pub fn wrt(&self, var: Var) -> Option<&[S]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Tape<S> {
    /// A recording tape: ops on inputs that require grad are differentiable.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that keeps values only. Nothing on it requires grad.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn push_raw(&mut self, mut value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn data(&self, i: usize) -> &[S] {
        self.nodes[i].value.data()
    }

    fn mismatch(&self, op: OpKind, inputs: &[usize], detail: &'static str) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            shapes: inputs.iter().map(|&i| self.shape(i).to_vec()).collect(),
            detail,
        }
    }

    /// Records a leaf. It is differentiable iff the tensor is flagged with
    /// `requires_grad` and this tape is recording.
    pub fn leaf(&mut self, tensor: &Tensor<S>) -> Var {
        let rg = self.recording && tensor.requires_grad();
        self.push_raw(tensor.clone(), Op::Leaf, rg)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.push_raw(tensor, Op::Leaf, false)
    }

    /// Exposes a rank-3 activation as a feature tap.
    pub fn tap(&self, layer_id: usize, var: Var) -> Result<FeatureTap<S>> {
        let i = self.idx(var)?;
        if self.shape(i).len() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Leaf,
                shapes: vec![self.shape(i).to_vec()],
                detail: "feature taps are (batch, channels, spatial)",
            });
        }
        Ok(FeatureTap {
            layer_id,
            var,
            value: self.nodes[i].value.clone(),
            grad_slot: None,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.shape(ai), self.shape(bi));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(OpKind::MatMul, &[ai, bi], "expected (m×k)·(k×n)"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(ai), self.data(bi), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.shape(xi);
        if s.len() != 2 {
            return Err(self.mismatch(OpKind::Transpose, &[xi], "expected a matrix"));
        }
        let (m, n) = (s[0], s[1]);
        let out = kernels::transpose(self.data(xi), m, n);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose { x: xi }, &[xi]))
    }

    /// Stride-1 convolution with `padding` zeros on each border.
    /// Input (B, C_in, H, W), weight (C_out, C_in, kh, kw).
    pub fn conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (sx, sw) = (self.shape(xi), self.shape(wi));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(self.mismatch(OpKind::Conv2d, &[xi, wi], "expected NCHW input and OIHW weight"));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(self.mismatch(OpKind::Conv2d, &[xi, wi], "kernel larger than padded input"));
        }
        let dims = ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            pad: padding,
        };
        let out = kernels::conv2d(self.data(xi), self.data(wi), dims);
        let shape = vec![dims.batch, dims.out_ch, dims.out_h(), dims.out_w()];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x: xi, w: wi, dims }, &[xi, wi]))
    }

    fn same_shape(&self, op: OpKind, a: usize, b: usize) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, &[a, b], "operands must have equal shapes"));
        }
        Ok(())
    }

    fn zip(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(kind, ai, bi)?;
        let data = self
            .data(ai)
            .iter()
            .zip(self.data(bi))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(ai).to_vec(), data)?;
        let op = match kind {
            OpKind::Add => Op::Add { a: ai, b: bi },
            OpKind::Sub => Op::Sub { a: ai, b: bi },
            OpKind::Mul => Op::Mul { a: ai, b: bi },
            _ => unreachable!("zip only builds elementwise binary ops"),
        };
        Ok(self.push(value, op, &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(OpKind::Mul, a, b, |x, y| x * y)
    }

    /// Adds `bias[c]` along axis 1 of a tensor of rank ≥ 2.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let (sx, sb) = (self.shape(xi), self.shape(bi));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(self.mismatch(OpKind::AddBias, &[xi, bi], "bias length must equal axis 1"));
        }
        let ch = sx[1];
        let inner = numel(&sx[2..]);
        let b = self.data(bi);
        let data = self
            .data(xi)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % ch])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x: xi, bias: bi }, &[xi, bi]))
    }

    fn unary(&mut self, x: Var, op: impl FnOnce(usize) -> Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(f);
        Ok(self.push(value, op(xi), &[xi]))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Result<Var> {
        self.unary(x, |x| Op::Scale { x, k }, |v| v * k)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |x| Op::Square { x }, |v| v * v)
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |x| Op::Relu { x },
            |v| if v > S::zero() || v.is_nan() { v } else { S::zero() },
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |x| Op::Log { x }, S::ln)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |x| Op::Exp { x }, S::exp)
    }

    /// 2×2 stride-2 average pooling of (B, C, H, W) with even H and W.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.shape(xi).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(self.mismatch(OpKind::AvgPool2, &[xi], "expected (B,C,H,W) with even H, W"));
        }
        let out = kernels::avg_pool2(self.data(xi), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push(value, Op::AvgPool2 { x: xi }, &[xi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        if numel(shape) != numel(self.shape(xi)) {
            return Err(self.mismatch(OpKind::Reshape, &[xi], "element count must be preserved"));
        }
        let value = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: xi }, &[xi]))
    }

    /// L2-normalizes along the last axis. Vectors with norm below
    /// [`NORM_EPS`] become zero vectors.
    pub fn normalize_last(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.shape(xi).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| self.mismatch(OpKind::NormalizeLast, &[xi], "rank ≥ 1"))?;
        let (out, norms) = kernels::normalize_rows(self.data(xi), n);
        Ok(self.push(Tensor::new(s, out)?, Op::NormalizeLast { x: xi, norms }, &[xi]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.shape(xi).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| self.mismatch(OpKind::SoftmaxLast, &[xi], "rank ≥ 1"))?;
        let out = kernels::softmax_rows(self.data(xi), n);
        Ok(self.push(Tensor::new(s, out)?, Op::SoftmaxLast { x: xi }, &[xi]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let total = self.data(xi).iter().copied().sum::<S>();
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: xi }, &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = self.data(xi).len();
        if n == 0 {
            return Err(self.mismatch(OpKind::Mean, &[xi], "mean of empty tensor"));
        }
        let total = self.data(xi).iter().copied().sum::<S>() / S::from_usize_lossy(n);
        Ok(self.push(Tensor::scalar(total), Op::Mean { x: xi }, &[xi]))
    }

    /// Reduces the last axis by summation.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.shape(xi).to_vec();
        let Some((&n, lead)) = s.split_last() else {
            return Err(self.mismatch(OpKind::SumLast, &[xi], "rank ≥ 1"));
        };
        let out = self
            .data(xi)
            .chunks(n.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        Ok(self.push(Tensor::new(lead.to_vec(), out)?, Op::SumLast { x: xi }, &[xi]))
    }

    /// Gathers rows of the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.shape(xi);
        if s.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(self.mismatch(OpKind::SelectRows, &[xi], "row index out of range"));
        }
        let value = self.nodes[xi].value.select_rows(rows);
        let op = Op::SelectRows {
            x: xi,
            rows: rows.to_vec(),
        };
        Ok(self.push(value, op, &[xi]))
    }

    /// Sums (B, C, S) over batch and spatial axes, leaving a length-C vector.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.shape(xi).to_vec();
        if s.len() != 3 {
            return Err(self.mismatch(OpKind::ChannelSum, &[xi], "expected (B, C, S)"));
        }
        let (c, sp) = (s[1], s[2]);
        let mut out = vec![S::zero(); c];
        for (i, &v) in self.data(xi).iter().enumerate() {
            out[(i / sp) % c] += v;
        }
        Ok(self.push(Tensor::from_vec(out), Op::ChannelSum { x: xi }, &[xi]))
    }

    /// `Σ w_i x_i` with constant (non-differentiated) weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[S]) -> Result<Var> {
        let xi = self.idx(x)?;
        if self.data(xi).len() != weights.len() {
            return Err(self.mismatch(OpKind::WeightedSum, &[xi], "one weight per element"));
        }
        let total = self.data(xi).iter().zip(weights).map(|(&a, &b)| a * b).sum::<S>();
        let op = Op::WeightedSum {
            x: xi,
            w: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total), op, &[xi]))
    }

    /// Batch mean of the hinged proxy-NCA loss
    /// `[ −log( exp(|η|(ŷ_y − margin)) / Σ_{i≠y} exp(|η| ŷ_i) ) ]₊`
    /// over class scores `logits` of shape (B, N).
    pub fn lsc_loss(&mut self, logits: Var, eta: Var, labels: &[usize], margin: S) -> Result<Var> {
        let (li, ei) = (self.idx(logits)?, self.idx(eta)?);
        let s = self.shape(li);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(self.mismatch(OpKind::LscLoss, &[li, ei], "logits must be (B, N) with B labels"));
        }
        if s[1] < 2 {
            return Err(self.mismatch(OpKind::LscLoss, &[li, ei], "at least two classes required"));
        }
        if self.data(ei).len() != 1 {
            return Err(self.mismatch(OpKind::LscLoss, &[li, ei], "eta must hold one element"));
        }
        let n = s[1];
        if labels.iter().any(|&y| y >= n) {
            return Err(self.mismatch(OpKind::LscLoss, &[li, ei], "label out of range"));
        }
        let eta_abs = self.data(ei)[0].abs();
        let total = self
            .data(li)
            .chunks(n)
            .zip(labels)
            .map(|(row, &y)| lsc_sample(row, y, eta_abs, margin).0)
            .sum::<S>();
        let value = Tensor::scalar(total / S::from_usize_lossy(labels.len()));
        let op = Op::LscLoss {
            logits: li,
            eta: ei,
            labels: labels.to_vec(),
            margin,
        };
        Ok(self.push(value, op, &[li, ei]))
    }

    /// Differentiates the scalar `loss`, filling `grad_slot` of every tap.
    pub fn backward(&self, loss: Var, taps: &mut [FeatureTap<S>]) -> Result<Gradients<S>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(li).to_vec()));
        }
        for tap in taps.iter() {
            if tap.var.tape != self.id || tap.var.index >= self.nodes.len() {
                return Err(AutodiffError::TapNotOnTape(tap.layer_id));
            }
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![S::one()]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![S::zero(); node.value.numel()]);
            }
        }
        for tap in taps.iter_mut() {
            let shape = self.shape(tap.var.index).to_vec();
            let data = grads[tap.var.index]
                .clone()
                .unwrap_or_else(|| vec![S::zero(); numel(&shape)]);
            tap.grad_slot = Some(Tensor::new(shape, data)?);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[*a].requires_grad {
                    let bt = kernels::transpose(self.data(*b), k, n);
                    accumulate(grads, *a, &kernels::matmul(g, &bt, m, n, k));
                }
                if self.nodes[*b].requires_grad {
                    let at = kernels::transpose(self.data(*a), m, k);
                    accumulate(grads, *b, &kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                self.accumulate_if(grads, *x, || kernels::transpose(g, s[1], s[0]));
            }
            Op::Conv2d { x, w, dims } => {
                let (dx, dw) = kernels::conv2d_backward(self.data(*x), self.data(*w), g, *dims);
                self.accumulate_if(grads, *x, || dx);
                self.accumulate_if(grads, *w, || dw);
            }
            Op::Add { a, b } => {
                self.accumulate_if(grads, *a, || g.to_vec());
                self.accumulate_if(grads, *b, || g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate_if(grads, *a, || g.to_vec());
                self.accumulate_if(grads, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate_if(grads, *a, || g.iter().zip(db).map(|(&gv, &y)| gv * y).collect());
                self.accumulate_if(grads, *b, || g.iter().zip(da).map(|(&gv, &x)| gv * x).collect());
            }
            Op::AddBias { x, bias } => {
                self.accumulate_if(grads, *x, || g.to_vec());
                let s = self.shape(*x);
                let (ch, inner) = (s[1], numel(&s[2..]));
                self.accumulate_if(grads, *bias, || {
                    let mut db = vec![S::zero(); ch];
                    for (j, &gv) in g.iter().enumerate() {
                        db[(j / inner) % ch] += gv;
                    }
                    db
                });
            }
            Op::Scale { x, k } => {
                self.accumulate_if(grads, *x, || g.iter().map(|&v| v * *k).collect());
            }
            Op::Square { x } => {
                let xd = self.data(*x);
                let two = S::lit(2.0);
                self.accumulate_if(grads, *x, || g.iter().zip(xd).map(|(&gv, &v)| two * v * gv).collect());
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                self.accumulate_if(grads, *x, || {
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                        .collect()
                });
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                self.accumulate_if(grads, *x, || kernels::avg_pool2_backward(g, s[0] * s[1], s[2], s[3]));
            }
            Op::Reshape { x } => self.accumulate_if(grads, *x, || g.to_vec()),
            Op::NormalizeLast { x, norms } => {
                let n = *self.shape(*x).last().unwrap_or(&1);
                let eps = S::lit(NORM_EPS);
                self.accumulate_if(grads, *x, || {
                    let mut dx = vec![S::zero(); g.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm < eps {
                            continue;
                        }
                        let span = r * n..(r + 1) * n;
                        let (y, gr) = (&out[span.clone()], &g[span.clone()]);
                        let dot = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                        for ((d, &yv), &gv) in dx[span].iter_mut().zip(y).zip(gr) {
                            *d = (gv - yv * dot) / norm;
                        }
                    }
                    dx
                });
            }
            Op::SoftmaxLast { x } => {
                let n = *self.shape(*x).last().unwrap_or(&1);
                self.accumulate_if(grads, *x, || {
                    let mut dx = vec![S::zero(); g.len()];
                    for ((y, gr), d) in out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                        for ((dv, &yv), &gv) in d.iter_mut().zip(y).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    dx
                });
            }
            Op::Log { x } => {
                let xd = self.data(*x);
                self.accumulate_if(grads, *x, || g.iter().zip(xd).map(|(&gv, &v)| gv / v).collect());
            }
            Op::Exp { x } => {
                self.accumulate_if(grads, *x, || g.iter().zip(out).map(|(&gv, &y)| gv * y).collect());
            }
            Op::Sum { x } => {
                let n = self.data(*x).len();
                self.accumulate_if(grads, *x, || vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.data(*x).len();
                let v = g[0] / S::from_usize_lossy(n);
                self.accumulate_if(grads, *x, || vec![v; n]);
            }
            Op::SumLast { x } => {
                let n = *self.shape(*x).last().unwrap_or(&1);
                self.accumulate_if(grads, *x, || {
                    g.iter().flat_map(|&gv| std::iter::repeat_n(gv, n)).collect()
                });
            }
            Op::SelectRows { x, rows } => {
                let total = self.data(*x).len();
                let row_len = numel(&self.shape(*x)[1..]);
                self.accumulate_if(grads, *x, || {
                    let mut dx = vec![S::zero(); total];
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &gv) in dx[r * row_len..(r + 1) * row_len]
                            .iter_mut()
                            .zip(&g[k * row_len..(k + 1) * row_len])
                        {
                            *d += gv;
                        }
                    }
                    dx
                });
            }
            Op::ChannelSum { x } => {
                let s = self.shape(*x);
                let (c, sp, total) = (s[1], s[2], self.data(*x).len());
                self.accumulate_if(grads, *x, || (0..total).map(|j| g[(j / sp) % c]).collect());
            }
            Op::WeightedSum { x, w } => {
                self.accumulate_if(grads, *x, || w.iter().map(|&wv| wv * g[0]).collect());
            }
            Op::LscLoss {
                logits,
                eta,
                labels,
                margin,
            } => {
                let n = self.shape(*logits)[1];
                let eta_v = self.data(*eta)[0];
                let eta_abs = eta_v.abs();
                let scale = g[0] / S::from_usize_lossy(labels.len());
                let mut dl = vec![S::zero(); self.data(*logits).len()];
                let mut de = S::zero();
                for ((row, d), &y) in self.data(*logits).chunks(n).zip(dl.chunks_mut(n)).zip(labels) {
                    let (value, probs) = lsc_sample(row, y, eta_abs, *margin);
                    if value <= S::zero() {
                        continue;
                    }
                    d[y] = -eta_abs * scale;
                    let mut expected = S::zero();
                    for (j, &p) in probs.iter().enumerate() {
                        if j != y {
                            d[j] = eta_abs * p * scale;
                            expected += p * row[j];
                        }
                    }
                    de += (expected - (row[y] - *margin)) * scale;
                }
                let sign = if eta_v < S::zero() { -S::one() } else { S::one() };
                self.accumulate_if(grads, *logits, || dl);
                self.accumulate_if(grads, *eta, || vec![de * sign]);
            }
        }
    }

    fn accumulate_if(&self, grads: &mut [Option<Vec<S>>], target: usize, delta: impl FnOnce() -> Vec<S>) {
        if self.nodes[target].requires_grad {
            accumulate(grads, target, &delta());
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], target: usize, delta: &[S]) {
    match &mut grads[target] {
        Some(g) => {
            for (a, &b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Per-sample hinged loss value and the softmax over the non-target classes.
fn lsc_sample<S: Scalar>(row: &[S], y: usize, eta: S, margin: S) -> (S, Vec<S>) {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| eta * v)
        .fold(S::neg_infinity(), S::max);
    let mut probs = vec![S::zero(); row.len()];
    let mut total = S::zero();
    for (j, &v) in row.iter().enumerate() {
        if j != y {
            probs[j] = (eta * v - max).exp();
            total += probs[j];
        }
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    let log_sum = max + total.ln();
    let inner = log_sum - eta * (row[y] - margin);
    // `max` would swallow a NaN here; keep it so callers can detect it.
    let hinged = if inner.is_nan() { inner } else { inner.max(S::zero()) };
    (hinged, probs)
}
