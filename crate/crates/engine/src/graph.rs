use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{EngineError, Result};
use crate::op::{CustomOp, Op, OpKind, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// A dynamic computation graph. Nodes are appended in evaluation order, so
/// creation order is a topological order and the graph is acyclic by
/// construction.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    stop_values: RefCell<Vec<Rc<Tensor<T>>>>,
    frozen_stops: Option<Vec<Rc<Tensor<T>>>>,
    stop_cursor: Cell<usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar root with respect to every reachable leaf that
/// requires a gradient.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T: Scalar> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(&v.id)
    }

    pub fn remove(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            stop_values: RefCell::new(Vec::new()),
            frozen_stops: None,
            stop_cursor: Cell::new(0),
        }
    }

    /// A graph whose stop-gradient nodes return the given values (in creation
    /// order) instead of their inputs. Finite-difference oracles use this to
    /// evaluate the same cut graph that the analytic backward differentiates.
    pub fn with_frozen_stops(values: Vec<Rc<Tensor<T>>>) -> Self {
        Self {
            frozen_stops: Some(values),
            ..Self::new()
        }
    }

    /// Values produced by stop-gradient nodes so far, in creation order.
    pub fn stop_values(&self) -> Vec<Rc<Tensor<T>>> {
        self.stop_values.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that accumulates gradient (a parameter or differentiable input).
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, Vec::new(), true)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::from_f64_lossy(value)))
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply<'g>(&'g self, op: Op<T>, inputs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        if inputs.iter().any(|v| !std::ptr::eq(v.graph, self)) {
            return Err(EngineError::ForeignVar);
        }
        let values: Vec<Rc<Tensor<T>>> = {
            let nodes = self.nodes.borrow();
            inputs.iter().map(|v| Rc::clone(&nodes[v.id].value)).collect()
        };
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let frozen = self.frozen_stops.as_ref().filter(|_| matches!(op, Op::StopGradient));
        let out = if let Some(frozen) = frozen {
            let k = self.stop_cursor.get();
            self.stop_cursor.set(k + 1);
            let v = frozen.get(k).ok_or_else(|| EngineError::InvalidAttr {
                op: "stop-gradient",
                msg: format!("no frozen value for stop-gradient #{k}"),
            })?;
            if v.shape() != refs.first().map(|t| t.shape()).unwrap_or(&[]) {
                return Err(EngineError::ShapeMismatch {
                    op: "stop-gradient",
                    shapes: vec![v.shape().to_vec(), refs[0].shape().to_vec()],
                });
            }
            v.as_ref().clone()
        } else {
            op.forward(&refs)?
        };
        let requires_grad = !matches!(op, Op::StopGradient) && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let is_stop = matches!(op, Op::StopGradient);
        let var = self.push(out, op, inputs.iter().map(|v| v.id).collect(), requires_grad);
        if is_stop {
            self.stop_values.borrow_mut().push(var.value());
        }
        Ok(var)
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn custom<'g>(&'g self, op: Rc<dyn CustomOp<T>>, inputs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        self.apply(Op::Custom(op), inputs)
    }

    /// Reverse-mode accumulation from a single-element root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<GradientMap<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(EngineError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        let mut out = GradientMap::default();
        if !root_node.requires_grad {
            return Ok(out);
        }
        grads[root.id] = Some(Tensor::ones(root_node.value.shape()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    out.grads.insert(id, g);
                }
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let input_grads = node.op.backward(&inputs, &node.value, &g, &needs);
            for ((&i, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(gi), true) = (gi, need) else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.add_assign_from(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Primitive that produced this node, `None` for leaves.
    pub fn kind(&self) -> Option<OpKind> {
        self.graph.nodes.borrow()[self.id].op.kind()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn un(self, op: Op<T>) -> Result<Self> {
        self.graph.apply(op, &[self])
    }

    fn bin(self, op: Op<T>, other: Self) -> Result<Self> {
        self.graph.apply(op, &[self, other])
    }

    /// `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]`, or `[b,m,k]·[k,n]`.
    pub fn matmul(self, other: Self) -> Result<Self> {
        self.bin(Op::MatMul, other)
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        self.un(Op::Transpose { perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Result<Self> {
        let r = self.shape().len();
        if r < 2 {
            return Err(EngineError::ShapeMismatch {
                op: "transpose",
                shapes: vec![self.shape()],
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.un(Op::Reshape { shape: shape.to_vec() })
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        self.un(Op::Slice { axis, start, end })
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.bin(Op::Add, other)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.bin(Op::Sub, other)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.bin(Op::Mul, other)
    }

    pub fn div(self, other: Self) -> Result<Self> {
        self.bin(Op::Div, other)
    }

    pub fn neg(self) -> Result<Self> {
        self.un(Op::Neg)
    }

    pub fn exp(self) -> Result<Self> {
        self.un(Op::Exp)
    }

    pub fn log(self) -> Result<Self> {
        self.un(Op::Log)
    }

    pub fn sqrt(self) -> Result<Self> {
        self.un(Op::Sqrt)
    }

    pub fn tanh(self) -> Result<Self> {
        self.un(Op::Tanh)
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.un(Op::Sigmoid)
    }

    pub fn relu(self) -> Result<Self> {
        self.un(Op::Relu)
    }

    pub fn powf(self, exponent: f64) -> Result<Self> {
        self.un(Op::Power { exponent })
    }

    pub fn square(self) -> Result<Self> {
        self.mul(self)
    }

    /// `|x|` as `relu(x) + relu(-x)`.
    pub fn abs(self) -> Result<Self> {
        self.relu()?.add(self.neg()?.relu()?)
    }

    pub fn sum(self) -> Result<Self> {
        self.un(Op::ReduceSum { axis: None })
    }

    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        self.un(Op::ReduceSum { axis: Some(axis) })
    }

    pub fn mean(self) -> Result<Self> {
        self.un(Op::ReduceMean { axis: None })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        self.un(Op::ReduceMean { axis: Some(axis) })
    }

    pub fn softmax(self) -> Result<Self> {
        self.un(Op::Softmax)
    }

    pub fn layer_norm(self, eps: f64) -> Result<Self> {
        self.un(Op::LayerNorm { eps })
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Self> {
        self.un(Op::Broadcast { shape: shape.to_vec() })
    }

    pub fn gather_rows(self, indices: &[usize]) -> Result<Self> {
        self.un(Op::GatherRows { indices: indices.to_vec() })
    }

    /// `self` is `[cin,h,w]`, `weight` is `[cout,cin,kh,kw]`.
    pub fn conv2d(self, weight: Self, stride: usize, padding: Padding) -> Result<Self> {
        self.bin(Op::Conv2d { stride, padding }, weight)
    }

    pub fn detach(self) -> Result<Self> {
        self.un(Op::StopGradient)
    }

    pub fn scale(self, factor: f64) -> Result<Self> {
        let c = self.graph.scalar(factor);
        self.mul(c)
    }

    pub fn add_scalar(self, value: f64) -> Result<Self> {
        let c = self.graph.scalar(value);
        self.add(c)
    }
}
