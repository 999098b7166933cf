//! Reverse-mode automatic differentiation over an append-only operation graph.
//!
//! A [`Graph`] is built once and stays immutable during evaluation. Runtime
//! state lives in [`Values`] (forward results) and [`GradStore`] (cotangents),
//! so one graph can be reused across optimization steps by rebinding leaves.
//!
//! Gradients accumulate: running [`Graph::backward`] twice without calling
//! [`GradStore::zero`] doubles every accumulator. This is deliberate, so
//! losses can be summed over repeated subgraph evaluations.

mod check;
mod conv;
mod eval;
mod op;
mod vjp;

pub use check::{grad_check, GradCheckEntry, GradCheckReport};
pub use op::{broadcast_shape, conv2d_out_dims, infer_shape, LeafKind, Op};

use std::collections::HashMap;
use std::sync::Arc;

use crate::{Error, Real, Result, Tensor};

/// Handle to a node inside one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

/// A user-defined differentiable operation (used by the soft rasterizer).
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn output_shape(&self, input_shapes: &[&[usize]]) -> Result<Vec<usize>>;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Per-input cotangents given forward inputs, the forward output, and the
    /// output cotangent. Entries may be `None` for inputs with no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

pub(crate) struct Node<T: Real> {
    pub op: Op<T>,
    pub shape: Vec<usize>,
    pub name: String,
}

/// Append-only operation graph. Node inputs always precede the node, so the
/// insertion order is a topological order.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<String, NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.index()].shape
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].name
    }

    /// Leaf node registered under `name`, if any.
    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// All leaves of the given kind, in creation order.
    pub fn leaves_of(&self, kind: LeafKind) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = self
            .leaves
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.index()].op, Op::Leaf(k) if k == kind))
            .map(|(n, id)| (n.clone(), *id))
            .collect();
        out.sort_by_key(|(_, id)| *id);
        out
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let name = format!("{}#{}", op.kind_name(), id.0);
        self.nodes.push(Node { op, shape, name });
        id
    }

    fn push_inferred(&mut self, op: Op<T>) -> Result<NodeId> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.shape.clone()).collect();
        let shape = op::infer_shape(&op, &shapes)?;
        Ok(self.push(op, shape))
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.named_leaf(name, shape, LeafKind::Input)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.named_leaf(name, shape, LeafKind::Param)
    }

    fn named_leaf(&mut self, name: &str, shape: &[usize], kind: LeafKind) -> NodeId {
        assert!(
            !self.leaves.contains_key(name),
            "leaf name {name:?} already used in this graph"
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf(kind), shape: shape.to_vec(), name: name.to_string() });
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::Div(a, b))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Neg(x), shape)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Exp(x), shape)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Log(x), shape)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Sqrt(x), shape)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Square(x), shape)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Sin(x), shape)
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Cos(x), shape)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid(x), shape)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Softplus(x), shape)
    }

    /// Identity forward, zero backward. Stops gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Detach(x), shape)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.push_inferred(Op::Softmax { x, axis })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::MatMul(a, b))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::Linear { x, w, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.push_inferred(Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push_inferred(Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::GlobalAvgPool(x))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.push_inferred(Op::UpsampleNearest { x, factor })
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.push_inferred(Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.push_inferred(Op::MeanAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll(x), vec![])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll(x), vec![])
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push_inferred(Op::Slice { x, axis, start, len })
    }

    /// Gather rows along axis 0; backward scatter-adds into the source.
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.push_inferred(Op::GatherRows { x, rows: Arc::new(rows) })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push_inferred(Op::Reshape { x, shape: shape.to_vec() })
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::Transpose2d(x))
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::Mse(a, b))
    }

    /// Mean 2-class cross-entropy: logits [2,H,W] vs target [H,W] in [0,1]
    /// (channel 1 is foreground). Scalar output.
    pub fn mask_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        self.push_inferred(Op::MaskCrossEntropy { logits, target })
    }

    pub fn custom(&mut self, inputs: &[NodeId], op: Arc<dyn CustomOp<T>>) -> Result<NodeId> {
        self.push_inferred(Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Evaluate every node. Leaves must be bound in `values` beforehand.
    pub fn forward(&self, values: &mut Values<T>) -> Result<()> {
        eval::run_forward(self, values)
    }

    /// Reverse-mode sweep from a scalar `output` node, accumulating into
    /// `grads`. Requires a completed forward pass in `values`.
    pub fn backward(&self, values: &Values<T>, output: NodeId, grads: &mut GradStore<T>) -> Result<()> {
        vjp::run_backward(self, values, output, grads)
    }

    pub(crate) fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.index()]
    }
}

/// Forward results, indexed by node id.
pub struct Values<T: Real> {
    vals: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Values<T> {
    pub fn new(graph: &Graph<T>) -> Self {
        Self { vals: vec![None; graph.len()] }
    }

    /// Bind a leaf before forward. Shape-checked against the graph.
    pub fn bind(&mut self, graph: &Graph<T>, id: NodeId, t: Tensor<T>) -> Result<()> {
        let node = graph.node(id);
        if !matches!(node.op, Op::Leaf(_)) {
            return Err(Error::Graph(format!("node {} is not a leaf", node.name)));
        }
        if t.shape() != node.shape {
            return Err(Error::Shape {
                op: "bind".into(),
                detail: format!("leaf {} wants {:?}, got {:?}", node.name, node.shape, t.shape()),
            });
        }
        if self.vals.len() < graph.len() {
            self.vals.resize(graph.len(), None);
        }
        self.vals[id.index()] = Some(t);
        Ok(())
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.vals.get(id.index()).and_then(|v| v.as_ref())
    }

    /// Value of a node after forward; panics if missing.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.get(id).expect("node not evaluated; run forward first")
    }

    /// Mutable access to a bound tensor (used to perturb leaves in place).
    pub fn get_mut(&mut self, id: NodeId) -> &mut Tensor<T> {
        self.vals[id.index()].as_mut().expect("node has no value")
    }

    pub(crate) fn set(&mut self, id: NodeId, t: Tensor<T>) {
        self.vals[id.index()] = Some(t);
    }

    /// Clear all non-leaf results, keeping leaf bindings.
    pub fn reset_computed(&mut self, graph: &Graph<T>) {
        for (i, v) in self.vals.iter_mut().enumerate() {
            if !matches!(graph.nodes[i].op, Op::Leaf(_)) {
                *v = None;
            }
        }
    }
}

/// Gradient accumulators, indexed by node id. Accumulate-on-write: a second
/// backward sweep adds on top of the first.
pub struct GradStore<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradStore<T> {
    pub fn new(graph: &Graph<T>) -> Self {
        Self { grads: vec![None; graph.len()] }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Zero every accumulator (drops them; absent means zero).
    pub fn zero(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub(crate) fn accumulate(&mut self, id: NodeId, t: Tensor<T>) {
        match &mut self.grads[id.index()] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), t.shape());
                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_and_names_nodes() {
        let mut g = Graph::<f32>::new();
        let x = g.input("x", &[2, 3]);
        let y = g.exp(x);
        assert_eq!(g.node_name(x), "x");
        assert_eq!(g.node_name(y), "exp#1");
        assert_eq!(g.shape(y), &[2, 3]);
    }

    #[test]
    fn shape_errors_surface_at_build_time() {
        let mut g = Graph::<f32>::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[4]);
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn bind_rejects_wrong_shape_and_non_leaf() {
        let mut g = Graph::<f32>::new();
        let x = g.input("x", &[2]);
        let y = g.neg(x);
        let mut vals = Values::new(&g);
        assert!(vals.bind(&g, x, Tensor::zeros(&[3])).is_err());
        assert!(vals.bind(&g, y, Tensor::zeros(&[2])).is_err());
        assert!(vals.bind(&g, x, Tensor::zeros(&[2])).is_ok());
    }
}
