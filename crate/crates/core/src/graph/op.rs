//! Operation records and their shape rules.

use std::sync::Arc;

use super::{CustomOp, NodeId};
use crate::{Error, Real, Result, Tensor};

/// Leaf role: inputs are bound per evaluation, params are the trainable set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
}

/// One graph operation. Node ids refer to earlier nodes only.
#[derive(Clone)]
pub enum Op<T: Real> {
    Leaf(LeafKind),
    Const(Tensor<T>),

    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),

    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Detach(NodeId),

    Softmax { x: NodeId, axis: usize },
    MatMul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },

    Concat { xs: Vec<NodeId>, axis: usize },
    GlobalAvgPool(NodeId),
    UpsampleNearest { x: NodeId, factor: usize },
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    GatherRows { x: NodeId, rows: Arc<Vec<usize>> },
    Reshape { x: NodeId, shape: Vec<usize> },
    Transpose2d(NodeId),

    Mse(NodeId, NodeId),
    MaskCrossEntropy { logits: NodeId, target: NodeId },

    Custom { inputs: Vec<NodeId>, op: Arc<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    pub fn kind_name(&self) -> &str {
        match self {
            Op::Leaf(LeafKind::Input) => "input",
            Op::Leaf(LeafKind::Param) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Detach(_) => "detach",
            Op::Softmax { .. } => "softmax",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat { .. } => "concat",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape { .. } => "reshape",
            Op::Transpose2d(_) => "transpose2d",
            Op::Mse(..) => "mse",
            Op::MaskCrossEntropy { .. } => "mask_cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }

    /// Ids of the nodes this op reads.
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Square(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Detach(x)
            | Op::GlobalAvgPool(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Transpose2d(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::UpsampleNearest { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Reshape { x, .. } => vec![*x],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::MaskCrossEntropy { logits, target } => vec![*logits, *target],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape { op: op.into(), detail }
}

/// Numpy-style broadcast of two shapes (right-aligned; extents equal or 1).
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

pub fn conv2d_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

/// Output shape of `op` given the shapes of all earlier nodes.
pub fn infer_shape<T: Real>(op: &Op<T>, shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
    let s = |id: NodeId| -> &Vec<usize> { &shapes[id.index()] };
    match op {
        Op::Leaf(_) => unreachable!("leaf shapes are given at creation"),
        Op::Const(t) => Ok(t.shape().to_vec()),

        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            broadcast_shape(s(*a), s(*b), op.kind_name())
        }

        Op::Neg(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Sqrt(x)
        | Op::Square(x)
        | Op::Sin(x)
        | Op::Cos(x)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Softplus(x)
        | Op::Detach(x) => Ok(s(*x).clone()),

        Op::Softmax { x, axis } => {
            let sx = s(*x);
            if *axis >= sx.len() {
                return Err(shape_err("softmax", format!("axis {axis} out of range for {sx:?}")));
            }
            Ok(sx.clone())
        }

        Op::MatMul(a, b) => {
            let (sa, sb) = (s(*a), s(*b));
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
            }
            Ok(vec![sa[0], sb[1]])
        }

        Op::Linear { x, w, b } => {
            let (sx, sw, sb) = (s(*x), s(*w), s(*b));
            if sx.len() != 1 || sw.len() != 2 || sb.len() != 1 || sw[1] != sx[0] || sw[0] != sb[0] {
                return Err(shape_err("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
            }
            Ok(vec![sw[0]])
        }

        Op::Conv2d { x, w, b, stride, pad } => {
            let (sx, sw, sb) = (s(*x), s(*w), s(*b));
            if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
                return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
            }
            if sw[1] != sx[0] || sb[0] != sw[0] {
                return Err(shape_err("conv2d", format!("channel mismatch: x {sx:?}, w {sw:?}, b {sb:?}")));
            }
            let (ho, wo) = conv2d_out_dims(sx[1], sx[2], sw[2], sw[3], *stride, *pad)?;
            Ok(vec![sw[0], ho, wo])
        }

        Op::Concat { xs, axis } => {
            if xs.is_empty() {
                return Err(shape_err("concat", "no inputs".into()));
            }
            let first = s(xs[0]).clone();
            if *axis >= first.len() {
                return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut out = first.clone();
            out[*axis] = 0;
            for &x in xs {
                let sx = s(x);
                if sx.len() != first.len() {
                    return Err(shape_err("concat", format!("rank mismatch: {first:?} vs {sx:?}")));
                }
                for (d, (&a, &b)) in first.iter().zip(sx).enumerate() {
                    if d != *axis && a != b {
                        return Err(shape_err("concat", format!("extent mismatch off-axis: {first:?} vs {sx:?}")));
                    }
                }
                out[*axis] += sx[*axis];
            }
            Ok(out)
        }

        Op::GlobalAvgPool(x) => {
            let sx = s(*x);
            if sx.len() != 3 {
                return Err(shape_err("global_avg_pool", format!("want [C,H,W], got {sx:?}")));
            }
            Ok(vec![sx[0]])
        }

        Op::UpsampleNearest { x, factor } => {
            let sx = s(*x);
            if sx.len() != 3 || *factor == 0 {
                return Err(shape_err("upsample_nearest", format!("want [C,H,W] and factor > 0, got {sx:?}")));
            }
            Ok(vec![sx[0], sx[1] * factor, sx[2] * factor])
        }

        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let sx = s(*x);
            if *axis >= sx.len() {
                return Err(shape_err("sum_axis", format!("axis {axis} out of range for {sx:?}")));
            }
            let mut out = sx.clone();
            out.remove(*axis);
            Ok(out)
        }

        Op::SumAll(_) | Op::MeanAll(_) => Ok(vec![]),

        Op::Slice { x, axis, start, len } => {
            let sx = s(*x);
            if *axis >= sx.len() || start + len > sx[*axis] || *len == 0 {
                return Err(shape_err("slice", format!("[{start}, {start}+{len}) along axis {axis} of {sx:?}")));
            }
            let mut out = sx.clone();
            out[*axis] = *len;
            Ok(out)
        }

        Op::GatherRows { x, rows } => {
            let sx = s(*x);
            if sx.is_empty() {
                return Err(shape_err("gather_rows", "scalar input".into()));
            }
            if let Some(&bad) = rows.iter().find(|&&r| r >= sx[0]) {
                return Err(shape_err("gather_rows", format!("row {bad} out of range for {sx:?}")));
            }
            let mut out = sx.clone();
            out[0] = rows.len();
            Ok(out)
        }

        Op::Reshape { x, shape } => {
            let sx = s(*x);
            let n: usize = sx.iter().product();
            let m: usize = shape.iter().product();
            if n != m {
                return Err(shape_err("reshape", format!("{sx:?} -> {shape:?}")));
            }
            Ok(shape.clone())
        }

        Op::Transpose2d(x) => {
            let sx = s(*x);
            if sx.len() != 2 {
                return Err(shape_err("transpose2d", format!("want rank 2, got {sx:?}")));
            }
            Ok(vec![sx[1], sx[0]])
        }

        Op::Mse(a, b) => {
            if s(*a) != s(*b) {
                return Err(shape_err("mse", format!("{:?} vs {:?}", s(*a), s(*b))));
            }
            Ok(vec![])
        }

        Op::MaskCrossEntropy { logits, target } => {
            let (sl, st) = (s(*logits), s(*target));
            if sl.len() != 3 || sl[0] != 2 || st.len() != 2 || sl[1] != st[0] || sl[2] != st[1] {
                return Err(shape_err("mask_cross_entropy", format!("logits {sl:?}, target {st:?}")));
            }
            Ok(vec![])
        }

        Op::Custom { inputs, op } => {
            let input_shapes: Vec<&[usize]> = inputs.iter().map(|id| shapes[id.index()].as_slice()).collect();
            op.output_shape(&input_shapes)
        }
    }
}
