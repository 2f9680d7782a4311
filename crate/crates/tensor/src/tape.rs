//! The recording tape. Every operation evaluates eagerly, appends a node with
//! enough saved state to run its backward rule, and hands back a [`Var`].

use std::fmt;

use crate::kernels::{gelu, gelu_grad, gemm_acc, gemm_nt_acc, gemm_tn_acc, log_sum_exp, softmax_in_place};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One packed sequence pair for [`Tape::attention_packed`]: query rows
/// `q_start..q_start + q_len` attend to key rows `k_start..k_start + k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Operation tag, used in error messages, reports and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    ScaleBy,
    Recip,
    Relu,
    Gelu,
    Tanh,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    LayerNorm,
    L2Normalize,
    Concat,
    Slice,
    Transpose,
    Reshape,
    Embedding,
    CrossEntropy,
    BceWithLogits,
    Sum,
    Mean,
    MeanRows,
    Attention,
}

impl OpKind {
    pub const ALL: [OpKind; 30] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::ScaleBy,
        OpKind::Recip,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::L2Normalize,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Embedding,
        OpKind::CrossEntropy,
        OpKind::BceWithLogits,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::ScaleBy => "scale_by",
            OpKind::Recip => "recip",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Embedding => "embedding",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::Attention => "attention",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, c: T },
    ScaleBy { x: Var, s: Var },
    Recip { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Tanh { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    L2Normalize { x: Var, inv_norm: Vec<T> },
    Concat { parts: Vec<Var>, rows_axis: bool },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    Embedding { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    MeanRows { x: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Vec<Segment>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulNt { .. } => OpKind::MatMulNt,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::Recip { .. } => OpKind::Recip,
            Op::Relu { .. } => OpKind::Relu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Exp { .. } => OpKind::Exp,
            Op::Log { .. } => OpKind::Log,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceRows { .. } | Op::SliceCols { .. } => OpKind::Slice,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::MeanRows { .. } => OpKind::MeanRows,
            Op::Attention { .. } => OpKind::Attention,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Wengert list of eagerly evaluated operations.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    debug_checks: bool,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            debug_checks: false,
            fault: None,
        }
    }

    /// Enables the non-finite check after every forward operation.
    pub fn set_debug_checks(&mut self, on: bool) {
        self.debug_checks = on;
    }

    /// Test fixture: scales the upstream gradient of every `kind` node by 1.5
    /// during backward, producing a wrong-but-plausible rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Saved per-head attention probabilities `[heads, tq, tk]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    fn push_raw(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.debug_checks && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.kind().name() });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., k] · b[k, n]`; leading extents of `a` fold into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).rows();
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push(Tensor::from_vec(shape, out)?, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(dim_err("matmul_nt", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(vec![m, n], out)?, Op::MatMulNt { a, b, m, k, n }, &[a, b])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let src = t.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::from_vec(vec![c, r], out)?, Op::Transpose { x }, &[x])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, &[a, b])
    }

    /// Adds a `[cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        if tr.numel() != c {
            return Err(dim_err("add_row", tx.shape(), tr.shape()));
        }
        let r = tr.data();
        let out = tx.data().iter().enumerate().map(|(i, &v)| v + r[i % c]).collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), out)?;
        self.push(t, Op::AddRow { x, row }, &[x, row])
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        Tensor::from_vec(t.shape().to_vec(), out).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.unary(x, |v| v * c);
        self.push(t, Op::Scale { x, c }, &[x])
    }

    /// Multiplies `x` by a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(dim_err("scale_by", self.shape(x), ts.shape()));
        }
        let c = ts.data()[0];
        let t = self.unary(x, |v| v * c);
        self.push(t, Op::ScaleBy { x, s }, &[x, s])
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, |v| v.recip());
        self.push(t, Op::Recip { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, |v| v.max(T::zero()));
        self.push(t, Op::Relu { x }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, gelu);
        self.push(t, Op::Gelu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, T::tanh);
        self.push(t, Op::Tanh { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, T::exp);
        self.push(t, Op::Exp { x }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, T::ln);
        self.push(t, Op::Log { x }, &[x])
    }

    // ---- row-wise -------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let c = t.cols();
        if c == 0 || t.numel() == 0 {
            return Err(TensorError::Domain {
                op: "softmax",
                msg: "empty input".into(),
            });
        }
        t.data_mut().chunks_mut(c).for_each(softmax_in_place);
        self.push(t, Op::Softmax { x }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let c = t.cols();
        if c == 0 || t.numel() == 0 {
            return Err(TensorError::Domain {
                op: "log_softmax",
                msg: "empty input".into(),
            });
        }
        for row in t.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(t, Op::LogSoftmax { x }, &[x])
    }

    /// Per-row normalisation followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c == 0 {
            return Err(TensorError::Domain {
                op: "layer_norm",
                msg: "zero-width rows".into(),
            });
        }
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(dim_err("layer_norm", tx.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let n = T::of(c as f64);
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = if var + eps > T::zero() {
                (var + eps).sqrt().recip()
            } else {
                T::zero()
            };
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::from_vec(tx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let floor = T::of(1e-12);
        let mut inv_norm = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            let inv = norm.recip();
            inv_norm.push(inv);
            out.extend(row.iter().map(|&v| v * inv));
        }
        let t = Tensor::from_vec(tx.shape().to_vec(), out)?;
        self.push(t, Op::L2Normalize { x, inv_norm }, &[x])
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates along rows (`axis == 0`) or columns (`axis == 1`).
    /// Inputs are viewed as matrices; the result is 2-D.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Domain {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let t0 = self.value(first);
        let out = match axis {
            0 => {
                let c = t0.cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != c {
                        return Err(dim_err("concat", t0.shape(), t.shape()));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(vec![rows, c], data)?
            }
            1 => {
                let r = t0.rows();
                let mut total = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != r {
                        return Err(dim_err("concat", t0.shape(), t.shape()));
                    }
                    total += t.cols();
                }
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::from_vec(vec![r, total], data)?
            }
            _ => {
                return Err(TensorError::Index {
                    op: "concat",
                    index: axis,
                    extent: 2,
                })
            }
        };
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                rows_axis: axis == 0,
            },
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: t.rows(),
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(vec![len, c], data)?;
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::from_vec(vec![t.rows(), len], data)?;
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    /// Gathers rows of `table` (`[vocab, d]`).
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: i,
                    extent: v,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(vec![indices.len(), d], data)?;
        self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x]).expect("finite sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Domain {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Column means: `[rows, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if r == 0 {
            return Err(TensorError::Domain {
                op: "mean_rows",
                msg: "no rows".into(),
            });
        }
        let mut out = vec![T::zero(); c];
        for row in t.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let inv = T::of(r as f64).recip();
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::from_vec(vec![1, c], out)?, Op::MeanRows { x }, &[x])
    }

    /// Mean token-level cross-entropy of `logits[n, classes]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n || n == 0 {
            return Err(dim_err("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = t.data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let ti = targets[i];
            if ti >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: ti,
                    extent: c,
                });
            }
            loss += log_sum_exp(row) - row[ti];
            softmax_in_place(row);
        }
        let loss = loss / T::of(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of raw logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(dim_err("bce_with_logits", t.shape(), &[targets.len()]));
        }
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<T>()
            / T::of(targets.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    // ---- attention ------------------------------------------------------

    /// Multi-head scaled dot-product attention over already projected
    /// `q[tq, d]`, `k[tk, d]`, `v[tk, d]`. With `causal`, query `i` only sees
    /// keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let seg = Segment {
            q_start: 0,
            q_len: self.value(q).rows(),
            k_start: 0,
            k_len: self.value(k).rows(),
        };
        self.attention_packed(q, k, v, &[seg], heads, causal)
    }

    /// Attention over several independent sequences packed along the rows
    /// of `q`, `k`, `v`. Query rows of segment `s` attend only to key rows of
    /// the same segment; every row of `q` must belong to exactly one segment,
    /// in order. Causal masking is relative to each segment's start.
    pub fn attention_packed(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (tq_, tk_, tv_) = (self.value(q), self.value(k), self.value(v));
        let d = tq_.cols();
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Domain {
                op: "attention",
                msg: format!("width {d} not divisible into {heads} heads"),
            });
        }
        if tk_.cols() != d || tv_.cols() != d {
            return Err(dim_err("attention", tq_.shape(), tk_.shape()));
        }
        if tk_.rows() != tv_.rows() {
            return Err(dim_err("attention", tk_.shape(), tv_.shape()));
        }
        let (tq, tk) = (tq_.rows(), tk_.rows());
        let mut next_q = 0;
        for s in segs {
            if s.q_start != next_q || s.k_start + s.k_len > tk {
                return Err(TensorError::Domain {
                    op: "attention",
                    msg: format!("segment {s:?} does not tile {tq} query / {tk} key rows"),
                });
            }
            if s.k_len == 0 {
                return Err(TensorError::Domain {
                    op: "attention",
                    msg: "no keys".into(),
                });
            }
            if causal && s.q_len > s.k_len {
                return Err(dim_err("attention", &[s.q_len, d], &[s.k_len, d]));
            }
            next_q += s.q_len;
        }
        if next_q != tq {
            return Err(TensorError::Domain {
                op: "attention",
                msg: format!("segments cover {next_q} of {tq} query rows"),
            });
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (tq_.data(), tk_.data(), tv_.data());
        let total: usize = segs.iter().map(|s| heads * s.q_len * s.k_len).sum();
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); tq * d];
        let mut base = 0;
        for s in segs {
            let (nq, nk) = (s.q_len, s.k_len);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let qi_row = s.q_start + i;
                    let visible = if causal { i + 1 } else { nk };
                    let p0 = base + (h * nq + i) * nk;
                    let prow = &mut probs[p0..p0 + nk];
                    let qi = &qd[qi_row * d + off..qi_row * d + off + dh];
                    for (j, p) in prow.iter_mut().enumerate().take(visible) {
                        let kr = s.k_start + j;
                        let kj = &kd[kr * d + off..kr * d + off + dh];
                        *p = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    softmax_in_place(&mut prow[..visible]);
                    let orow = &mut out[qi_row * d + off..qi_row * d + off + dh];
                    for (j, &p) in prow.iter().enumerate().take(visible) {
                        let kr = s.k_start + j;
                        let vj = &vd[kr * d + off..kr * d + off + dh];
                        orow.iter_mut().zip(vj).for_each(|(o, &x)| *o += p * x);
                    }
                }
            }
            base += heads * nq * nk;
        }
        let t = Tensor::from_vec(vec![tq, d], out)?;
        let segs = segs.to_vec();
        self.push(t, Op::Attention { q, k, v, heads, segs, probs }, &[q, k, v])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. The seed gradient is 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= T::of(1.5));
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| gemm_nt_acc(g, bd, ga, m, n, k));
                self.acc(grads, *b, |gb| gemm_tn_acc(ad, g, gb, m, k, n));
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| gemm_acc(g, bd, ga, m, n, k));
                self.acc(grads, *b, |gb| gemm_tn_acc(g, ad, gb, m, n, k));
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).zip(bd).for_each(|((x, &y), &z)| *x += y * z)
                });
                self.acc(grads, *b, |gb| {
                    gb.iter_mut().zip(g).zip(ad).for_each(|((x, &y), &z)| *x += y * z)
                });
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *row, |gr| {
                    let c = gr.len();
                    g.chunks(c).for_each(|gc| add_into(gr, gc));
                });
            }
            Op::Scale { x, c } => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c));
            }
            Op::ScaleBy { x, s } => {
                let c = self.data(*s)[0];
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c));
                self.acc(grads, *s, |gs| {
                    gs[0] += g.iter().zip(xd).map(|(&a, &b)| a * b).sum::<T>()
                });
            }
            Op::Recip { x } => {
                // d(1/x) = -1/x² = -out²
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(g).zip(out).for_each(|((a, &b), &y)| *a -= b * y * y)
                });
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    gx.iter_mut()
                        .zip(g)
                        .zip(xd)
                        .for_each(|((a, &b), &v)| {
                            if v > T::zero() {
                                *a += b
                            }
                        })
                });
            }
            Op::Gelu { x } => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(g).zip(xd).for_each(|((a, &b), &v)| *a += b * gelu_grad(v))
                });
            }
            Op::Tanh { x } => {
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(g).zip(out).for_each(|((a, &b), &y)| *a += b * (T::one() - y * y))
                });
            }
            Op::Exp { x } => {
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(g).zip(out).for_each(|((a, &b), &y)| *a += b * y)
                });
            }
            Op::Log { x } => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(g).zip(xd).for_each(|((a, &b), &v)| *a += b / v)
                });
            }
            Op::Softmax { x } => {
                let c = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((a, &dy), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *a += y * (dy - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let c = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let total: T = gr.iter().copied().sum();
                        for ((a, &dy), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *a += dy - y.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gam = self.data(*gamma);
                let n = T::of(c as f64);
                self.acc(grads, *x, |gx| {
                    for (r, (gxr, gr)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            gxr[j] += inv_std[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        gg.iter_mut().zip(gr).zip(xh).for_each(|((a, &b), &h)| *a += b * h);
                    }
                });
                self.acc(grads, *beta, |gb| g.chunks(c).for_each(|gr| add_into(gb, gr)));
            }
            Op::L2Normalize { x, inv_norm } => {
                let c = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for (r, ((gxr, gr), yr)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)).enumerate() {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((a, &dy), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *a += (dy - y * dot) * inv_norm[r];
                        }
                    }
                });
            }
            Op::Concat { parts, rows_axis } => {
                if *rows_axis {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        self.acc(grads, p, |gp| add_into(gp, &g[off..off + len]));
                        off += len;
                    }
                } else {
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        self.acc(grads, p, |gp| {
                            for (i, gpr) in gp.chunks_mut(w).enumerate() {
                                add_into(gpr, &g[i * total + col..i * total + col + w]);
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                self.acc(grads, *x, |gx| add_into(&mut gx[start * c..start * c + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    for (i, gr) in g.chunks(w).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + w], gr);
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(grads, *x, |gx| add_into(gx, g));
            }
            Op::Transpose { x } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = node.value.cols();
                self.acc(grads, *table, |gt| {
                    for (row, &i) in g.chunks(d).zip(indices) {
                        add_into(&mut gt[i * d..(i + 1) * d], row);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / T::of(targets.len() as f64);
                self.acc(grads, *logits, |gl| {
                    for (i, (glr, pr)) in gl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for (j, (a, &p)) in glr.iter_mut().zip(pr).enumerate() {
                            let y = if j == targets[i] { T::one() } else { T::zero() };
                            *a += scale * (p - y);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let zd = self.data(*logits);
                let scale = g[0] / T::of(targets.len() as f64);
                self.acc(grads, *logits, |gl| {
                    for ((a, &z), &y) in gl.iter_mut().zip(zd).zip(targets) {
                        let s = (T::one() + (-z).exp()).recip();
                        *a += scale * (s - y);
                    }
                });
            }
            Op::Sum { x } => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean { x } => {
                let n = T::of(self.value(*x).numel() as f64);
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::MeanRows { x } => {
                let t = self.value(*x);
                let (r, c) = (t.rows(), t.cols());
                let inv = T::of(r as f64).recip();
                self.acc(grads, *x, |gx| {
                    for gr in gx.chunks_mut(c) {
                        gr.iter_mut().zip(g).for_each(|(a, &b)| *a += b * inv);
                    }
                });
            }
            Op::Attention { q, k, v, heads, segs, probs } => {
                self.attention_backward(*q, *k, *v, *heads, segs, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &[Segment],
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, tk, d) = (self.value(q).rows(), self.value(k).rows(), self.value(q).cols());
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![T::zero(); tq * d];
        let mut dk = vec![T::zero(); tk * d];
        let mut dv = vec![T::zero(); tk * d];
        let max_k = segs.iter().map(|s| s.k_len).max().unwrap_or(0);
        let mut dp = vec![T::zero(); max_k];
        let mut base = 0;
        for s in segs {
            let (nq, nk) = (s.q_len, s.k_len);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let qr = s.q_start + i;
                    let p0 = base + (h * nq + i) * nk;
                    let prow = &probs[p0..p0 + nk];
                    let gi = &g[qr * d + off..qr * d + off + dh];
                    // dP = dO · Vᵀ, dV += Pᵀ · dO
                    for j in 0..nk {
                        let kr = s.k_start + j;
                        let vj = &vd[kr * d + off..kr * d + off + dh];
                        dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        let p = prow[j];
                        if p != T::zero() {
                            dv[kr * d + off..kr * d + off + dh]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(a, &b)| *a += p * b);
                        }
                    }
                    let dot: T = dp[..nk].iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    let qi = &qd[qr * d + off..qr * d + off + dh];
                    for j in 0..nk {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kr = s.k_start + j;
                        let kj = &kd[kr * d + off..kr * d + off + dh];
                        dq[qr * d + off..qr * d + off + dh]
                            .iter_mut()
                            .zip(kj)
                            .for_each(|(a, &b)| *a += ds * b);
                        dk[kr * d + off..kr * d + off + dh]
                            .iter_mut()
                            .zip(qi)
                            .for_each(|(a, &b)| *a += ds * b);
                    }
                }
            }
            base += heads * nq * nk;
        }
        self.acc(grads, q, |gq| add_into(gq, &dq));
        self.acc(grads, k, |gk| add_into(gk, &dk));
        self.acc(grads, v, |gv| add_into(gv, &dv));
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(buf);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}
