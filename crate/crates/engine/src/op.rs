//! Primitive operations: forward kernels and their vector-Jacobian products.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{EngineError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, Tensor};

/// A primitive whose kernels live outside this crate (the batched 3×3 SVD
/// rotation solve is registered this way).
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Returns one entry per input; `None` means no gradient flows there.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2` zeros on every side; output extent `ceil(n / stride)` for odd `k`.
    Same,
    Valid,
}

/// Primitive kind without attributes. Parsing an unrecognised name yields
/// [`EngineError::UnknownOp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    Power,
    ReduceSum,
    ReduceMean,
    Softmax,
    LayerNorm,
    Broadcast,
    GatherRows,
    Conv2d,
    StopGradient,
    Svd3Batched,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Power,
        OpKind::ReduceSum,
        OpKind::ReduceMean,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Broadcast,
        OpKind::GatherRows,
        OpKind::Conv2d,
        OpKind::StopGradient,
        OpKind::Svd3Batched,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Power => "power",
            OpKind::ReduceSum => "reduce-sum",
            OpKind::ReduceMean => "reduce-mean",
            OpKind::Softmax => "row-softmax",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Broadcast => "broadcast",
            OpKind::GatherRows => "gather-rows",
            OpKind::Conv2d => "conv2d",
            OpKind::StopGradient => "stop-gradient",
            OpKind::Svd3Batched => "svd3-batched",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| EngineError::UnknownOp(s.to_string()))
    }
}

/// A primitive together with its attributes.
#[derive(Clone)]
pub enum Op<T: Scalar> {
    Leaf,
    MatMul,
    Transpose { perm: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    Power { exponent: f64 },
    /// `axis: None` reduces everything to a rank-0 tensor.
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    /// Max-subtracted softmax over the last axis.
    Softmax,
    /// Normalisation over the last axis, no affine terms.
    LayerNorm { eps: f64 },
    Broadcast { shape: Vec<usize> },
    GatherRows { indices: Vec<usize> },
    Conv2d { stride: usize, padding: Padding },
    StopGradient,
    /// Kernel supplied by the caller; used for `svd3-batched`.
    Custom(Rc<dyn CustomOp<T>>),
}

impl<T: Scalar> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Leaf => f.write_str("leaf"),
            Op::Custom(c) => write!(f, "custom({})", c.name()),
            other => f.write_str(other.kind().map(OpKind::name).unwrap_or("?")),
        }
    }
}

impl<T: Scalar> Op<T> {
    pub fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Neg => OpKind::Neg,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Sqrt => OpKind::Sqrt,
            Op::Tanh => OpKind::Tanh,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Relu => OpKind::Relu,
            Op::Power { .. } => OpKind::Power,
            Op::ReduceSum { .. } => OpKind::ReduceSum,
            Op::ReduceMean { .. } => OpKind::ReduceMean,
            Op::Softmax => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Broadcast { .. } => OpKind::Broadcast,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::StopGradient => OpKind::StopGradient,
            Op::Custom(_) => OpKind::Svd3Batched,
        })
    }

    fn label(&self) -> &'static str {
        self.kind().map(OpKind::name).unwrap_or("leaf")
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Concat { .. } | Op::Custom(_) => None,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Conv2d { .. } => Some(2),
            _ => Some(1),
        }
    }

    pub fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(EngineError::Arity {
                    op: self.label(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        }
        match self {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul => matmul_forward(inputs[0], inputs[1]),
            Op::Transpose { perm } => transpose_forward(inputs[0], perm),
            Op::Reshape { shape } => inputs[0].clone().reshaped(shape),
            Op::Concat { axis } => concat_forward(inputs, *axis),
            Op::Slice { axis, start, end } => slice_forward(inputs[0], *axis, *start, *end),
            Op::Add => binary_forward("add", inputs[0], inputs[1], |a, b| a + b),
            Op::Sub => binary_forward("sub", inputs[0], inputs[1], |a, b| a - b),
            Op::Mul => binary_forward("mul", inputs[0], inputs[1], |a, b| a * b),
            Op::Div => binary_forward("div", inputs[0], inputs[1], |a, b| a / b),
            Op::Neg => Ok(inputs[0].map(|v| -v)),
            Op::Exp => Ok(inputs[0].map(|v| v.exp())),
            Op::Log => Ok(inputs[0].map(|v| v.ln())),
            Op::Sqrt => Ok(inputs[0].map(|v| v.sqrt())),
            Op::Tanh => Ok(inputs[0].map(|v| v.tanh())),
            Op::Sigmoid => Ok(inputs[0].map(sigmoid)),
            Op::Relu => Ok(inputs[0].map(|v| if v > T::zero() { v } else { T::zero() })),
            Op::Power { exponent } => {
                let p = T::from_f64_lossy(*exponent);
                Ok(inputs[0].map(|v| v.powf(p)))
            }
            Op::ReduceSum { axis } => reduce_forward(inputs[0], *axis, false),
            Op::ReduceMean { axis } => reduce_forward(inputs[0], *axis, true),
            Op::Softmax => softmax_forward(inputs[0]),
            Op::LayerNorm { eps } => layer_norm_forward(inputs[0], *eps),
            Op::Broadcast { shape } => broadcast_forward(inputs[0], shape),
            Op::GatherRows { indices } => gather_forward(inputs[0], indices),
            Op::Conv2d { stride, padding } => {
                conv2d_forward(inputs[0], inputs[1], *stride, *padding)
            }
            Op::StopGradient => Ok(inputs[0].clone()),
            Op::Custom(c) => c.forward(inputs),
        }
    }

    /// Vector-Jacobian product. `needs[i]` marks inputs that want a gradient.
    pub fn backward(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::Leaf | Op::StopGradient => vec![None; inputs.len()],
            Op::MatMul => {
                let (ga, gb) = matmul_backward(inputs[0], inputs[1], g, want(0), want(1));
                vec![ga, gb]
            }
            Op::Transpose { perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(transpose_forward(g, &inv).expect("inverse permutation"))]
            }
            Op::Reshape { .. } => vec![Some(
                g.clone()
                    .reshaped(inputs[0].shape())
                    .expect("reshape preserves numel"),
            )],
            Op::Concat { axis } => concat_backward(inputs, g, *axis, needs),
            Op::Slice { axis, start, .. } => {
                vec![Some(slice_backward(inputs[0].shape(), g, *axis, *start))]
            }
            Op::Add => {
                let ga = want(0).then(|| reduce_to(g, inputs[0]));
                let gb = want(1).then(|| reduce_to(g, inputs[1]));
                vec![ga, gb]
            }
            Op::Sub => {
                let ga = want(0).then(|| reduce_to(g, inputs[0]));
                let gb = want(1).then(|| reduce_to(&g.map(|v| -v), inputs[1]));
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = want(0).then(|| reduce_to(&zip_bcast(g, b, |gv, bv| gv * bv), a));
                let gb = want(1).then(|| reduce_to(&zip_bcast(g, a, |gv, av| gv * av), b));
                vec![ga, gb]
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = want(0).then(|| reduce_to(&zip_bcast(g, b, |gv, bv| gv / bv), a));
                let gb = want(1).then(|| {
                    // d(a/b)/db = -out / b
                    let go = zip_bcast(g, out, |gv, ov| gv * ov);
                    reduce_to(&zip_bcast(&go, b, |v, bv| -v / bv), b)
                });
                vec![ga, gb]
            }
            Op::Neg => vec![Some(g.map(|v| -v))],
            Op::Exp => vec![Some(zip_same(g, out, |gv, o| gv * o))],
            Op::Log => vec![Some(zip_same(g, inputs[0], |gv, x| gv / x))],
            Op::Sqrt => {
                let half = T::from_f64_lossy(0.5);
                vec![Some(zip_same(g, out, |gv, o| gv * half / o))]
            }
            Op::Tanh => vec![Some(zip_same(g, out, |gv, o| gv * (T::one() - o * o)))],
            Op::Sigmoid => vec![Some(zip_same(g, out, |gv, o| gv * o * (T::one() - o)))],
            Op::Relu => vec![Some(zip_same(g, inputs[0], |gv, x| {
                if x > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            }))],
            Op::Power { exponent } => {
                let p = T::from_f64_lossy(*exponent);
                let pm1 = T::from_f64_lossy(*exponent - 1.0);
                vec![Some(zip_same(g, inputs[0], |gv, x| gv * p * x.powf(pm1)))]
            }
            Op::ReduceSum { axis } => vec![Some(reduce_backward(inputs[0], g, *axis, false))],
            Op::ReduceMean { axis } => vec![Some(reduce_backward(inputs[0], g, *axis, true))],
            Op::Softmax => vec![Some(softmax_backward(out, g))],
            Op::LayerNorm { eps } => vec![Some(layer_norm_backward(inputs[0], g, *eps))],
            Op::Broadcast { .. } => vec![Some(broadcast_backward(inputs[0].shape(), g))],
            Op::GatherRows { indices } => vec![Some(gather_backward(inputs[0].shape(), g, indices))],
            Op::Conv2d { stride, padding } => {
                let (gx, gw) =
                    conv2d_backward(inputs[0], inputs[1], g, *stride, *padding, want(0), want(1));
                vec![gx, gw]
            }
            Op::Custom(c) => c.backward(inputs, out, g),
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn mismatch<T: Scalar>(op: &'static str, ts: &[&Tensor<T>]) -> EngineError {
    EngineError::ShapeMismatch {
        op,
        shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// ---------------------------------------------------------------------------
// elementwise

/// Output shape of a binary elementwise op: equal shapes, or one shape is a
/// trailing suffix of the other.
pub(crate) fn binary_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() >= b.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

fn binary_forward<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = binary_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(op, &[a, b]))?;
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let n = numel(&shape);
    let mut data: Vec<T> = Vec::with_capacity(n);
    if na == n && nb == n {
        data.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    } else if nb == 1 {
        data.extend(ad.iter().map(|&x| f(x, bd[0])));
    } else if na == 1 {
        data.extend(bd.iter().map(|&y| f(ad[0], y)));
    } else if na == n {
        for chunk in ad.chunks(nb) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in bd.chunks(na) {
            data.extend(ad.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    Tensor::new(shape, data)
}

/// `g` has the full output shape; `other` may be a trailing-suffix operand.
fn zip_bcast<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let od = other.data();
    let mut data = Vec::with_capacity(g.numel());
    if od.len() == 1 {
        data.extend(g.data().iter().map(|&gv| f(gv, od[0])));
    } else {
        for chunk in g.data().chunks(od.len()) {
            data.extend(chunk.iter().zip(od).map(|(&gv, &ov)| f(gv, ov)));
        }
    }
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn zip_same<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

/// Sums a full-shape gradient down onto a (possibly suffix-shaped) operand.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if g.shape() == target.shape() {
        return g.clone();
    }
    let nt = target.numel();
    let mut acc = vec![T::zero(); nt];
    for chunk in g.data().chunks(nt) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Tensor::new(target.shape().to_vec(), acc).expect("target shape")
}

// ---------------------------------------------------------------------------
// matmul

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize, bool)> {
    // (batch, m, k, n, rhs_shared)
    let err = || mismatch("matmul", &[a, b]);
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n, true)),
        ([bs, m, k], [bs2, k2, n]) if bs == bs2 && k == k2 => Ok((*bs, *m, *k, *n, false)),
        ([bs, m, k], [k2, n]) if k == k2 => Ok((1, bs * m, *k, *n, true)),
        _ => Err(err()),
    }
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k, n, _) = matmul_dims(a, b)?;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = n;
    let mut out = vec![T::zero(); bs * m * n];
    for i in 0..bs {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..],
            false,
            &b.data()[i * k * n..],
            false,
            &mut out[i * m * n..],
            false,
        );
    }
    Tensor::new(shape, out)
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (bs, m, k, n, _) = matmul_dims(a, b).expect("validated in forward");
    let ga = want_a.then(|| {
        let mut ga = vec![T::zero(); bs * m * k];
        for i in 0..bs {
            // dA = dC · Bᵀ
            gemm(
                m,
                n,
                k,
                &g.data()[i * m * n..],
                false,
                &b.data()[i * k * n..],
                true,
                &mut ga[i * m * k..],
                false,
            );
        }
        Tensor::new(a.shape().to_vec(), ga).expect("shape")
    });
    let gb = want_b.then(|| {
        let mut gb = vec![T::zero(); b.numel()];
        for i in 0..bs {
            // dB = Aᵀ · dC
            gemm(
                k,
                m,
                n,
                &a.data()[i * m * k..],
                true,
                &g.data()[i * m * n..],
                false,
                &mut gb[i * k * n..],
                false,
            );
        }
        Tensor::new(b.shape().to_vec(), gb).expect("shape")
    });
    (ga, gb)
}

// ---------------------------------------------------------------------------
// layout

fn transpose_forward<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(EngineError::InvalidAttr {
            op: "transpose",
            msg: format!("{perm:?} is not a permutation of rank {rank} (input shape {:?})", x.shape()),
        });
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return Ok(x.clone());
    }
    // Iterate over output indices, innermost axis in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(xd[base + j * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat_forward<T: Scalar>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(EngineError::Arity {
        op: "concat",
        expected: 1,
        got: 0,
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(EngineError::InvalidAttr {
            op: "concat",
            msg: format!("axis {axis} out of range for shape {:?}", first.shape()),
        });
    }
    for t in inputs {
        let ok = t.rank() == rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(mismatch("concat", inputs));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = split_at_axis(&shape, axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for t in inputs {
            let w = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::new(shape, out)
}

fn concat_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    g: &Tensor<T>,
    axis: usize,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let mut start = 0;
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let len = t.shape()[axis];
            let s = start;
            start += len;
            if needs.get(i).copied().unwrap_or(false) {
                Some(slice_forward(g, axis, s, s + len).expect("in range"))
            } else {
                None
            }
        })
        .collect()
}

fn slice_forward<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start >= end || end > x.shape()[axis] {
        return Err(EngineError::InvalidAttr {
            op: "slice",
            msg: format!("range {start}..{end} on axis {axis} invalid for shape {:?}", x.shape()),
        });
    }
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Tensor::new(shape, out)
}

fn slice_backward<T: Scalar>(in_shape: &[usize], g: &Tensor<T>, axis: usize, start: usize) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(in_shape, axis);
    let w = g.shape()[axis];
    let mut out = vec![T::zero(); numel(in_shape)];
    for o in 0..outer {
        let dst = o * len * inner + start * inner;
        out[dst..dst + w * inner].copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
    }
    Tensor::new(in_shape.to_vec(), out).expect("shape")
}

fn broadcast_forward<T: Scalar>(x: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    let src = x.shape();
    let bad = || EngineError::ShapeMismatch {
        op: "broadcast",
        shapes: vec![src.to_vec(), target.to_vec()],
    };
    if src.len() > target.len() {
        return Err(bad());
    }
    let offset = target.len() - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; target.len()];
    for (i, &d) in src.iter().enumerate() {
        if d == target[offset + i] {
            eff[offset + i] = src_strides[i];
        } else if d != 1 {
            return Err(bad());
        }
    }
    let n = numel(target);
    let mut out = Vec::with_capacity(n);
    let rank = target.len();
    if rank == 0 {
        return Ok(x.clone());
    }
    let mut idx = vec![0usize; rank];
    let xd = x.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
        out.push(xd[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(target.to_vec(), out)
}

fn broadcast_backward<T: Scalar>(src: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let target = g.shape();
    let rank = target.len();
    if rank == 0 {
        return g.clone();
    }
    let offset = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for (i, &d) in src.iter().enumerate() {
        if d == target[offset + i] {
            eff[offset + i] = src_strides[i];
        }
    }
    let mut out = vec![T::zero(); numel(src)];
    let mut idx = vec![0usize; rank];
    for &gv in g.data() {
        let off: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
        out[off] += gv;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(src.to_vec(), out).expect("shape")
}

fn gather_forward<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(mismatch("gather-rows", &[x]));
    }
    let rows = x.shape()[0];
    let width = x.numel() / rows.max(1);
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(EngineError::InvalidAttr {
            op: "gather-rows",
            msg: format!("index {bad} out of range for shape {:?}", x.shape()),
        });
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    let mut out = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
    }
    Tensor::new(shape, out)
}

fn gather_backward<T: Scalar>(src: &[usize], g: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let width = numel(&src[1..]);
    let mut out = vec![T::zero(); numel(src)];
    for (r, &i) in indices.iter().enumerate() {
        for (o, &v) in out[i * width..(i + 1) * width]
            .iter_mut()
            .zip(&g.data()[r * width..(r + 1) * width])
        {
            *o += v;
        }
    }
    Tensor::new(src.to_vec(), out).expect("shape")
}

// ---------------------------------------------------------------------------
// reductions and normalisation

fn reduce_forward<T: Scalar>(x: &Tensor<T>, axis: Option<usize>, mean: bool) -> Result<Tensor<T>> {
    match axis {
        None => {
            let s: T = x.data().iter().copied().sum();
            let n = T::from_usize(x.numel().max(1)).expect("count");
            Ok(Tensor::scalar(if mean { s / n } else { s }))
        }
        Some(axis) => {
            if axis >= x.rank() {
                return Err(EngineError::InvalidAttr {
                    op: if mean { "reduce-mean" } else { "reduce-sum" },
                    msg: format!("axis {axis} out of range for shape {:?}", x.shape()),
                });
            }
            let (outer, len, inner) = split_at_axis(x.shape(), axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            if mean {
                let n = T::from_usize(len).expect("count");
                out.iter_mut().for_each(|v| *v /= n);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)
        }
    }
}

fn reduce_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, axis: Option<usize>, mean: bool) -> Tensor<T> {
    match axis {
        None => {
            let mut v = g.item();
            if mean {
                v /= T::from_usize(x.numel().max(1)).expect("count");
            }
            Tensor::full(x.shape(), v)
        }
        Some(axis) => {
            let (outer, len, inner) = split_at_axis(x.shape(), axis);
            let scale = if mean {
                T::one() / T::from_usize(len).expect("count")
            } else {
                T::one()
            };
            let mut out = Vec::with_capacity(x.numel());
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    out.extend(src.iter().map(|&v| v * scale));
                }
            }
            Tensor::new(x.shape().to_vec(), out).expect("shape")
        }
    }
}

fn last_axis<T: Scalar>(x: &Tensor<T>) -> usize {
    x.shape().last().copied().unwrap_or(1).max(1)
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = last_axis(x);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let w = last_axis(y);
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(w).zip(g.data().chunks(w)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
    }
    Tensor::new(y.shape().to_vec(), out).expect("shape")
}

fn layer_norm_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).expect("count");
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn layer_norm_forward<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let eps = T::from_f64_lossy(eps);
    let w = last_axis(x);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(w) {
        let (mean, rstd) = layer_norm_stats(row, eps);
        out.extend(row.iter().map(|&v| (v - mean) * rstd));
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn layer_norm_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, eps: f64) -> Tensor<T> {
    let eps = T::from_f64_lossy(eps);
    let w = last_axis(x);
    let n = T::from_usize(w).expect("count");
    let mut out = Vec::with_capacity(x.numel());
    for (xr, gr) in x.data().chunks(w).zip(g.data().chunks(w)) {
        let (mean, rstd) = layer_norm_stats(xr, eps);
        let g_mean = gr.iter().copied().sum::<T>() / n;
        let gx_mean = xr
            .iter()
            .zip(gr)
            .map(|(&xv, &gv)| gv * (xv - mean) * rstd)
            .sum::<T>()
            / n;
        out.extend(
            xr.iter()
                .zip(gr)
                .map(|(&xv, &gv)| rstd * (gv - g_mean - (xv - mean) * rstd * gx_mean)),
        );
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape")
}

// ---------------------------------------------------------------------------
// convolution

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad_h: usize,
    pad_w: usize,
    stride: usize,
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: Padding) -> Result<ConvGeom> {
    let err = || mismatch("conv2d", &[x, w]);
    let (&[cin, h, wd], &[cout, cin2, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(err());
    };
    if cin != cin2 || stride == 0 {
        return Err(err());
    }
    let (pad_h, pad_w) = match padding {
        Padding::Same => (kh / 2, kw / 2),
        Padding::Valid => (0, 0),
    };
    if h + 2 * pad_h < kh || wd + 2 * pad_w < kw {
        return Err(err());
    }
    let oh = (h + 2 * pad_h - kh) / stride + 1;
    let ow = (wd + 2 * pad_w - kw) / stride + 1;
    Ok(ConvGeom {
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
        pad_h,
        pad_w,
        stride,
    })
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.cin * g.kh * g.kw * p];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, stride, padding)?;
    let cols = im2col(x.data(), &g);
    let kk = g.cin * g.kh * g.kw;
    let p = g.oh * g.ow;
    let mut out = vec![T::zero(); g.cout * p];
    gemm(g.cout, kk, p, w.data(), false, &cols, false, &mut out, false);
    Tensor::new(vec![g.cout, g.oh, g.ow], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    padding: Padding,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = conv_geom(x, w, stride, padding).expect("validated in forward");
    let kk = g.cin * g.kh * g.kw;
    let p = g.oh * g.ow;
    let gw = want_w.then(|| {
        let cols = im2col(x.data(), &g);
        let mut gw = vec![T::zero(); g.cout * kk];
        gemm(g.cout, p, kk, gout.data(), false, &cols, true, &mut gw, false);
        Tensor::new(w.shape().to_vec(), gw).expect("shape")
    });
    let gx = want_x.then(|| {
        let mut gcols = vec![T::zero(); kk * p];
        gemm(kk, g.cout, p, w.data(), true, gout.data(), false, &mut gcols, false);
        Tensor::new(x.shape().to_vec(), col2im(&gcols, &g)).expect("shape")
    });
    (gx, gw)
}
