//! Reverse sweep: vector-Jacobian products per operation.

use super::conv;
use super::eval::{axis_split, binary_broadcast, matmul, reduce_to_shape, stable_sigmoid, transpose2d};
use super::op::Op;
use super::{GradStore, Graph, NodeId, Values};
use crate::{Error, Real, Result, Tensor};

pub(super) fn run_backward<T: Real>(
    graph: &Graph<T>,
    values: &Values<T>,
    output: NodeId,
    grads: &mut GradStore<T>,
) -> Result<()> {
    let out_val = values
        .get(output)
        .ok_or_else(|| Error::Graph("backward before forward: output has no value".into()))?;
    if out_val.numel() != 1 {
        return Err(Error::Graph(format!(
            "backward needs a scalar output, got shape {:?} at {}",
            out_val.shape(),
            graph.node_name(output)
        )));
    }

    // Cotangents for this sweep live in a fresh store; the persistent store
    // only receives completed ones, so repeated sweeps add cleanly.
    let mut cot: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    cot[output.index()] = Some(Tensor::full(out_val.shape(), T::ONE));

    for idx in (0..=output.index()).rev() {
        let Some(g) = cot[idx].take() else { continue };
        let id = NodeId::from_index(idx);
        backprop_node(graph, values, id, &g, &mut cot)?;
        grads.accumulate(id, g);
    }
    Ok(())
}

fn add_to<T: Real>(cot: &mut [Option<Tensor<T>>], id: NodeId, t: Tensor<T>) {
    match &mut cot[id.index()] {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), t.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn backprop_node<T: Real>(
    graph: &Graph<T>,
    values: &Values<T>,
    id: NodeId,
    g: &Tensor<T>,
    cot: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |x: NodeId| -> &Tensor<T> {
        values.get(x).expect("backward before forward: missing node value")
    };
    match &graph.node(id).op {
        Op::Leaf(_) | Op::Const(_) | Op::Detach(_) => {}

        Op::Add(a, b) => {
            add_to(cot, *a, reduce_to_shape(g, graph.shape(*a)));
            add_to(cot, *b, reduce_to_shape(g, graph.shape(*b)));
        }
        Op::Sub(a, b) => {
            add_to(cot, *a, reduce_to_shape(g, graph.shape(*a)));
            add_to(cot, *b, reduce_to_shape(&g.map(|v| -v), graph.shape(*b)));
        }
        Op::Mul(a, b) => {
            let ga = binary_broadcast(g, val(*b), g.shape(), |x, y| x * y);
            let gb = binary_broadcast(g, val(*a), g.shape(), |x, y| x * y);
            add_to(cot, *a, reduce_to_shape(&ga, graph.shape(*a)));
            add_to(cot, *b, reduce_to_shape(&gb, graph.shape(*b)));
        }
        Op::Div(a, b) => {
            let ga = binary_broadcast(g, val(*b), g.shape(), |x, y| x / y);
            add_to(cot, *a, reduce_to_shape(&ga, graph.shape(*a)));
            let gy = binary_broadcast(g, val(*a), g.shape(), |x, y| x * y);
            let gb = binary_broadcast(&gy, val(*b), g.shape(), |x, y| -(x / (y * y)));
            add_to(cot, *b, reduce_to_shape(&gb, graph.shape(*b)));
        }

        Op::Neg(x) => add_to(cot, *x, g.map(|v| -v)),
        Op::Exp(x) => add_to(cot, *x, zip(g, val(id), |gv, yv| gv * yv)),
        Op::Log(x) => add_to(cot, *x, zip(g, val(*x), |gv, xv| gv / xv)),
        Op::Sqrt(x) => {
            let half = T::from_f64(0.5);
            add_to(cot, *x, zip(g, val(id), |gv, yv| gv * half / yv));
        }
        Op::Square(x) => {
            let two = T::from_f64(2.0);
            add_to(cot, *x, zip(g, val(*x), |gv, xv| gv * two * xv));
        }
        Op::Sin(x) => add_to(cot, *x, zip(g, val(*x), |gv, xv| gv * xv.cos())),
        Op::Cos(x) => add_to(cot, *x, zip(g, val(*x), |gv, xv| -(gv * xv.sin()))),
        Op::Relu(x) => add_to(cot, *x, zip(g, val(*x), |gv, xv| if xv > T::ZERO { gv } else { T::ZERO })),
        Op::Sigmoid(x) => add_to(cot, *x, zip(g, val(id), |gv, yv| gv * yv * (T::ONE - yv))),
        Op::Softplus(x) => add_to(cot, *x, zip(g, val(*x), |gv, xv| gv * stable_sigmoid(xv))),

        Op::Softmax { x, axis } => {
            let y = val(id);
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let mut dx = Tensor::zeros(y.shape());
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = T::ZERO;
                    for j in 0..n {
                        let k = base + j * inner;
                        dot += g.data()[k] * y.data()[k];
                    }
                    for j in 0..n {
                        let k = base + j * inner;
                        dx.data_mut()[k] = y.data()[k] * (g.data()[k] - dot);
                    }
                }
            }
            add_to(cot, *x, dx);
        }

        Op::MatMul(a, b) => {
            let bt = transpose2d(val(*b));
            let at = transpose2d(val(*a));
            add_to(cot, *a, matmul(g, &bt));
            add_to(cot, *b, matmul(&at, g));
        }

        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n_out, n_in) = (wv.shape()[0], wv.shape()[1]);
            let wt = transpose2d(wv);
            let mut dx = Tensor::zeros(&[n_in]);
            T::gemm(n_in, n_out, 1, T::ONE, wt.data(), g.data(), T::ZERO, dx.data_mut());
            let mut dw = Tensor::zeros(&[n_out, n_in]);
            T::gemm(n_out, 1, n_in, T::ONE, g.data(), xv.data(), T::ZERO, dw.data_mut());
            add_to(cot, *x, dx);
            add_to(cot, *w, dw);
            add_to(cot, *b, g.clone());
        }

        Op::Conv2d { x, w, b, stride, pad } => {
            let (dx, dw, db) = conv::conv2d_backward(val(*x), val(*w), g, *stride, *pad);
            add_to(cot, *x, dx);
            add_to(cot, *w, dw);
            add_to(cot, *b, db);
        }

        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(g.shape(), *axis);
            let mut at = 0usize;
            for &x in xs {
                let n = graph.shape(x)[*axis];
                let mut part = Tensor::zeros(graph.shape(x));
                for o in 0..outer {
                    let src = (o * total + at) * inner;
                    let dst = o * n * inner;
                    part.data_mut()[dst..dst + n * inner].copy_from_slice(&g.data()[src..src + n * inner]);
                }
                add_to(cot, x, part);
                at += n;
            }
        }

        Op::GlobalAvgPool(x) => {
            let sx = graph.shape(*x);
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            let norm = T::from_f64(1.0 / (h * w) as f64);
            let mut dx = Tensor::zeros(sx);
            for ci in 0..c {
                let gv = g.data()[ci] * norm;
                for v in &mut dx.data_mut()[ci * h * w..(ci + 1) * h * w] {
                    *v = gv;
                }
            }
            add_to(cot, *x, dx);
        }

        Op::UpsampleNearest { x, factor } => {
            let sx = graph.shape(*x);
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            let (ho, wo) = (h * factor, w * factor);
            let mut dx = Tensor::zeros(sx);
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        dx.data_mut()[(ci * h + i / factor) * w + j / factor] += g.data()[(ci * ho + i) * wo + j];
                    }
                }
            }
            add_to(cot, *x, dx);
        }

        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let sx = graph.shape(*x);
            let (outer, n, inner) = axis_split(sx, *axis);
            let mean = matches!(graph.node(id).op, Op::MeanAxis { .. });
            let scale = if mean { T::from_f64(1.0 / n as f64) } else { T::ONE };
            let mut dx = Tensor::zeros(sx);
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        dx.data_mut()[(o * n + j) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            add_to(cot, *x, dx);
        }

        Op::SumAll(x) => add_to(cot, *x, Tensor::full(graph.shape(*x), g.item())),
        Op::MeanAll(x) => {
            let sx = graph.shape(*x);
            let n: usize = sx.iter().product();
            add_to(cot, *x, Tensor::full(sx, g.item() / T::from_f64(n as f64)));
        }

        Op::Slice { x, axis, start, len } => {
            let sx = graph.shape(*x);
            let (outer, n, inner) = axis_split(sx, *axis);
            let mut dx = Tensor::zeros(sx);
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            add_to(cot, *x, dx);
        }

        Op::GatherRows { x, rows } => {
            let sx = graph.shape(*x);
            let row: usize = sx[1..].iter().product();
            let mut dx = Tensor::zeros(sx);
            for (k, &r) in rows.iter().enumerate() {
                for i in 0..row {
                    dx.data_mut()[r * row + i] += g.data()[k * row + i];
                }
            }
            add_to(cot, *x, dx);
        }

        Op::Reshape { x, .. } => {
            add_to(cot, *x, g.clone().reshaped(graph.shape(*x)).expect("reshape grad"));
        }
        Op::Transpose2d(x) => add_to(cot, *x, transpose2d(g)),

        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let scale = g.item() * T::from_f64(2.0 / av.numel() as f64);
            let da = zip(av, bv, |x, y| scale * (x - y));
            let db = da.map(|v| -v);
            add_to(cot, *a, da);
            add_to(cot, *b, db);
        }

        Op::MaskCrossEntropy { logits, target } => {
            let (lv, tv) = (val(*logits), val(*target));
            let hw = tv.numel();
            let scale = g.item() / T::from_f64(hw as f64);
            let mut dl = Tensor::zeros(lv.shape());
            let mut dt = Tensor::zeros(tv.shape());
            for p in 0..hw {
                let l0 = lv.data()[p];
                let l1 = lv.data()[hw + p];
                let m = l0.max(l1);
                let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                let z = e0 + e1;
                let t = tv.data()[p];
                dl.data_mut()[p] = scale * (e0 / z - (T::ONE - t));
                dl.data_mut()[hw + p] = scale * (e1 / z - t);
                dt.data_mut()[p] = scale * (l0 - l1);
            }
            add_to(cot, *logits, dl);
            add_to(cot, *target, dt);
        }

        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let dins = op.backward(&ins, val(id), g)?;
            debug_assert_eq!(dins.len(), inputs.len());
            for (input, din) in inputs.iter().zip(dins) {
                if let Some(din) = din {
                    add_to(cot, *input, din);
                }
            }
        }
    }
    Ok(())
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}
