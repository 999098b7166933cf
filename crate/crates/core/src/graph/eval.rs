//! Forward evaluation of graph nodes.

use super::conv;
use super::op::{LeafKind, Op};
use super::{Graph, NodeId, Values};
use crate::{Error, Real, Result, Tensor};

/// Per-output-dim strides into `in_shape` when broadcast to `out_shape`
/// (stride 0 on broadcast dims). Shapes are right-aligned.
pub(crate) fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out_shape.len()];
    let offset = out_shape.len() - in_shape.len();
    let mut s = 1usize;
    for i in (0..in_shape.len()).rev() {
        strides[offset + i] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    strides
}

pub(crate) fn binary_broadcast<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == out_shape && b.shape() == out_shape {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data).unwrap();
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let (mut off_a, mut off_b) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a.data()[off_a], b.data()[off_b]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

/// Sum `g` down to `target` shape (inverse of broadcasting in backward).
pub(crate) fn reduce_to_shape<T: Real>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let strides = broadcast_strides(target, g.shape());
    let rank = g.shape().len();
    let mut out = Tensor::zeros(target);
    let mut idx = vec![0usize; rank];
    let mut off_t = 0usize;
    for i in 0..g.numel() {
        out.data_mut()[off_t] += g.data()[i];
        for d in (0..rank).rev() {
            idx[d] += 1;
            off_t += strides[d];
            if idx[d] < g.shape()[d] {
                break;
            }
            idx[d] = 0;
            off_t -= strides[d] * g.shape()[d];
        }
    }
    out
}

/// Split a shape at `axis` into (outer, n, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

#[inline]
pub(crate) fn stable_sigmoid<T: Real>(x: T) -> T {
    if x.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
pub(crate) fn stable_softplus<T: Real>(x: T) -> T {
    x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

pub(crate) fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, T::ONE, a.data(), b.data(), T::ZERO, out.data_mut());
    out
}

pub(crate) fn transpose2d<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = x.data()[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = x.data()[base];
            for j in 1..n {
                m = m.max(x.data()[base + j * inner]);
            }
            let mut z = T::ZERO;
            for j in 0..n {
                let e = (x.data()[base + j * inner] - m).exp();
                out.data_mut()[base + j * inner] = e;
                z += e;
            }
            for j in 0..n {
                let v = out.data()[base + j * inner];
                out.data_mut()[base + j * inner] = v / z;
            }
        }
    }
    out
}

fn unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

pub(super) fn run_forward<T: Real>(graph: &Graph<T>, values: &mut Values<T>) -> Result<()> {
    for idx in 0..graph.len() {
        let id = NodeId::from_index(idx);
        let node = graph.node(id);
        let out = match &node.op {
            Op::Leaf(kind) => {
                if values.get(id).is_none() {
                    let what = match kind {
                        LeafKind::Input => "input",
                        LeafKind::Param => "param",
                    };
                    return Err(Error::Graph(format!("unbound {what} leaf {}", node.name)));
                }
                if !values.value(id).all_finite() {
                    return Err(Error::NonFinite { node: idx, op: node.name.clone() });
                }
                continue;
            }
            Op::Const(t) => t.clone(),

            Op::Add(a, b) => binary_broadcast(values.value(*a), values.value(*b), &node.shape, |x, y| x + y),
            Op::Sub(a, b) => binary_broadcast(values.value(*a), values.value(*b), &node.shape, |x, y| x - y),
            Op::Mul(a, b) => binary_broadcast(values.value(*a), values.value(*b), &node.shape, |x, y| x * y),
            Op::Div(a, b) => binary_broadcast(values.value(*a), values.value(*b), &node.shape, |x, y| x / y),

            Op::Neg(x) => unary(values.value(*x), |v| -v),
            Op::Exp(x) => unary(values.value(*x), |v| v.exp()),
            Op::Log(x) => unary(values.value(*x), |v| v.ln()),
            Op::Sqrt(x) => unary(values.value(*x), |v| v.sqrt()),
            Op::Square(x) => unary(values.value(*x), |v| v * v),
            Op::Sin(x) => unary(values.value(*x), |v| v.sin()),
            Op::Cos(x) => unary(values.value(*x), |v| v.cos()),
            Op::Relu(x) => unary(values.value(*x), |v| v.max(T::ZERO)),
            Op::Sigmoid(x) => unary(values.value(*x), stable_sigmoid),
            Op::Softplus(x) => unary(values.value(*x), stable_softplus),
            Op::Detach(x) => values.value(*x).clone(),

            Op::Softmax { x, axis } => softmax(values.value(*x), *axis),
            Op::MatMul(a, b) => matmul(values.value(*a), values.value(*b)),
            Op::Linear { x, w, b } => {
                let (xv, wv, bv) = (values.value(*x), values.value(*w), values.value(*b));
                let (n_out, n_in) = (wv.shape()[0], wv.shape()[1]);
                let mut out = bv.clone();
                T::gemm(n_out, n_in, 1, T::ONE, wv.data(), xv.data(), T::ONE, out.data_mut());
                out
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                conv::conv2d_forward(values.value(*x), values.value(*w), values.value(*b), *stride, *pad)
            }

            Op::Concat { xs, axis } => {
                let parts: Vec<&Tensor<T>> = xs.iter().map(|&x| values.value(x)).collect();
                concat(&parts, *axis, &node.shape)
            }
            Op::GlobalAvgPool(x) => {
                let xv = values.value(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let norm = T::from_f64(1.0 / (h * w) as f64);
                let mut out = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let mut s = T::ZERO;
                    for &v in &xv.data()[ci * h * w..(ci + 1) * h * w] {
                        s += v;
                    }
                    out.data_mut()[ci] = s * norm;
                }
                out
            }
            Op::UpsampleNearest { x, factor } => upsample_nearest(values.value(*x), *factor),
            Op::SumAxis { x, axis } => sum_axis(values.value(*x), *axis, false),
            Op::MeanAxis { x, axis } => sum_axis(values.value(*x), *axis, true),
            Op::SumAll(x) => {
                let mut s = T::ZERO;
                for &v in values.value(*x).data() {
                    s += v;
                }
                Tensor::scalar(s)
            }
            Op::MeanAll(x) => {
                let xv = values.value(*x);
                let mut s = T::ZERO;
                for &v in xv.data() {
                    s += v;
                }
                Tensor::scalar(s / T::from_f64(xv.numel() as f64))
            }
            Op::Slice { x, axis, start, len } => slice(values.value(*x), *axis, *start, *len),
            Op::GatherRows { x, rows } => gather_rows(values.value(*x), rows),
            Op::Reshape { x, shape } => values.value(*x).clone().reshaped(shape)?,
            Op::Transpose2d(x) => transpose2d(values.value(*x)),

            Op::Mse(a, b) => {
                let (av, bv) = (values.value(*a), values.value(*b));
                let mut s = T::ZERO;
                for (&x, &y) in av.data().iter().zip(bv.data()) {
                    let d = x - y;
                    s += d * d;
                }
                Tensor::scalar(s / T::from_f64(av.numel() as f64))
            }
            Op::MaskCrossEntropy { logits, target } => mask_cross_entropy(values.value(*logits), values.value(*target)),

            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| values.value(i)).collect();
                op.forward(&ins)?
            }
        };
        debug_assert_eq!(out.shape(), &node.shape[..], "shape rule mismatch at {}", node.name);
        if !out.all_finite() {
            return Err(Error::NonFinite { node: idx, op: node.name.clone() });
        }
        values.set(id, out);
    }
    Ok(())
}

fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize, out_shape: &[usize]) -> Tensor<T> {
    let (outer, _, inner) = axis_split(out_shape, axis);
    let mut out = Tensor::zeros(out_shape);
    let total_axis = out_shape[axis];
    let mut at = 0usize;
    for p in parts {
        let n = p.shape()[axis];
        for o in 0..outer {
            let src = &p.data()[o * n * inner..(o + 1) * n * inner];
            let dst_base = (o * total_axis + at) * inner;
            out.data_mut()[dst_base..dst_base + n * inner].copy_from_slice(src);
        }
        at += n;
    }
    out
}

fn upsample_nearest<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h * f, w * f);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                out.data_mut()[(ci * ho + i) * wo + j] = x.data()[(ci * h + i / f) * w + j / f];
            }
        }
    }
    out
}

fn sum_axis<T: Real>(x: &Tensor<T>, axis: usize, mean: bool) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let mut out = Tensor::zeros(&shape);
    let norm = if mean { T::from_f64(1.0 / n as f64) } else { T::ONE };
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                out.data_mut()[o * inner + i] += x.data()[(o * n + j) * inner + i];
            }
        }
    }
    if mean {
        for v in out.data_mut() {
            *v = *v * norm;
        }
    }
    out
}

fn slice<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        let src = (o * n + start) * inner;
        let dst = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&x.data()[src..src + len * inner]);
    }
    out
}

fn gather_rows<T: Real>(x: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let row: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    let mut out = Tensor::zeros(&shape);
    for (k, &r) in rows.iter().enumerate() {
        out.data_mut()[k * row..(k + 1) * row].copy_from_slice(&x.data()[r * row..(r + 1) * row]);
    }
    out
}

/// Mean over pixels of -log p(class), channel 1 = foreground, soft targets
/// allowed. Stable via logsumexp.
fn mask_cross_entropy<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let hw = target.numel();
    let mut s = T::ZERO;
    for p in 0..hw {
        let l0 = logits.data()[p];
        let l1 = logits.data()[hw + p];
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let t = target.data()[p];
        s += (T::ONE - t) * (lse - l0) + t * (lse - l1);
    }
    Tensor::scalar(s / T::from_f64(hw as f64))
}

