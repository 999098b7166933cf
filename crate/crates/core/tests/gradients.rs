//! Finite-difference verification for every differentiable primitive.

use handkit::graph::{grad_check, Graph, GradStore, NodeId, Values};
use handkit::{Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `head = sum(expr * random_const)` so cotangents are non-uniform,
/// binds every leaf with values in [lo, hi), and runs grad_check.
fn check_expr(
    seeds: std::ops::Range<u64>,
    lo: f64,
    hi: f64,
    h: f64,
    tol: f64,
    build: impl Fn(&mut Graph<f64>, &mut ChaCha8Rng) -> NodeId,
) {
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let out = build(&mut g, &mut rng);
        // Head weights bounded away from zero keep every cotangent healthy.
        let w = g.constant(
            rand_tensor(&mut rng, &g.shape(out).to_vec(), -1.0, 1.0)
                .map(|v| if v >= 0.0 { v + 0.3 } else { v - 0.3 }),
        );
        let prod = g.mul(out, w).unwrap();
        let head = g.sum_all(prod);

        let mut vals = Values::new(&g);
        for (_, id) in g.leaves_of(handkit::graph::LeafKind::Param) {
            let t = rand_tensor(&mut rng, &g.shape(id).to_vec(), lo, hi);
            vals.bind(&g, id, t).unwrap();
        }
        let report = grad_check(&g, &mut vals, head, &[], h, tol).unwrap();
        assert!(
            report.passed(),
            "seed {seed}: worst {} = {:.3e}",
            report.worst().unwrap().name,
            report.max_err()
        );
    }
}

#[test]
fn elementwise_binary_with_broadcast() {
    check_expr(0..10, 0.3, 1.7, 1e-5, 1e-4, |g, _| {
        let a = g.param("a", &[2, 3, 4]);
        let b = g.param("b", &[3, 1]);
        let c = g.param("c", &[]);
        let s = g.add(a, b).unwrap();
        let d = g.sub(s, c).unwrap();
        let m = g.mul(d, b).unwrap();
        g.div(m, a).unwrap()
    });
}

#[test]
fn elementwise_unary_smooth() {
    check_expr(0..10, 0.2, 1.5, 1e-5, 1e-4, |g, _| {
        let x = g.param("x", &[3, 5]);
        let e = g.exp(x);
        let l = g.log(x);
        let q = g.sqrt(x);
        let s = g.square(x);
        let sn = g.sin(x);
        let cs = g.cos(x);
        let n = g.neg(x);
        let t1 = g.add(e, l).unwrap();
        let t2 = g.add(q, s).unwrap();
        let t3 = g.add(sn, cs).unwrap();
        let t4 = g.add(t1, t2).unwrap();
        let t5 = g.add(t3, n).unwrap();
        g.add(t4, t5).unwrap()
    });
}

#[test]
fn activations() {
    // Inputs bounded away from 0 so relu's kink is not sampled.
    check_expr(0..10, 0.2, 2.0, 1e-5, 1e-4, |g, _| {
        let x = g.param("x", &[4, 4]);
        let shift = g.constant(Tensor::full(&[4, 4], 1.1));
        let y = g.sub(x, shift).unwrap();
        let r = g.relu(y);
        let sg = g.sigmoid(y);
        let sp = g.softplus(y);
        let a = g.add(r, sg).unwrap();
        g.add(a, sp).unwrap()
    });
}

#[test]
fn relu_away_from_kink_is_nearly_exact() {
    // Piecewise-linear region: central differences are exact up to rounding.
    check_expr(0..3, 0.5, 1.5, 1e-3, 1e-8, |g, _| {
        let x = g.param("x", &[6]);
        g.relu(x)
    });
}

#[test]
fn softmax_all_axes() {
    check_expr(0..10, -1.0, 1.0, 1e-5, 1e-4, |g, _| {
        let x = g.param("x", &[3, 4, 2]);
        let s0 = g.softmax(x, 0).unwrap();
        let s1 = g.softmax(x, 1).unwrap();
        let s2 = g.softmax(x, 2).unwrap();
        let a = g.add(s0, s1).unwrap();
        g.add(a, s2).unwrap()
    });
}

#[test]
fn matmul_and_linear() {
    check_expr(0..10, -1.0, 1.0, 1e-5, 1e-4, |g, _| {
        let a = g.param("a", &[3, 4]);
        let b = g.param("b", &[4, 2]);
        let x = g.param("x", &[4]);
        let w = g.param("w", &[3, 4]);
        let bias = g.param("bias", &[3]);
        let mm = g.matmul(a, b).unwrap();
        let lin = g.linear(x, w, bias).unwrap();
        let lin2 = g.reshape(lin, &[3, 1]).unwrap();
        let mm2 = g.slice(mm, 1, 0, 1).unwrap();
        g.add(mm2, lin2).unwrap()
    });
}

#[test]
fn conv2d_stride_and_pad() {
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 3)] {
        check_expr(0..10, -1.0, 1.0, 1e-5, 1e-4, move |g, _| {
            let x = g.param("x", &[2, 6, 5]);
            let w = g.param("w", &[3, 2, 3, 3]);
            let b = g.param("b", &[3]);
            g.conv2d(x, w, b, stride, pad).unwrap()
        });
    }
}

#[test]
fn conv2d_quadratic_head_is_nearly_exact() {
    // mse(conv(x,w)+b, const) is quadratic per coordinate: central
    // differences should agree to rounding error.
    check_expr(0..3, -1.0, 1.0, 1e-3, 1e-6, |g, rng| {
        let x = g.param("x", &[1, 5, 5]);
        let w = g.param("w", &[2, 1, 3, 3]);
        let b = g.param("b", &[2]);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        let t = g.constant(rand_tensor(rng, &[2, 3, 3], -1.0, 1.0));
        g.mse(y, t).unwrap()
    });
}

#[test]
fn shape_and_layout_ops() {
    check_expr(0..10, -1.0, 1.0, 1e-5, 1e-4, |g, _| {
        let x = g.param("x", &[4, 3]);
        let y = g.param("y", &[2, 3]);
        let cat = g.concat(&[x, y], 0).unwrap();
        let t = g.transpose2d(cat).unwrap();
        let r = g.reshape(t, &[2, 9]).unwrap();
        let s = g.slice(r, 1, 2, 5).unwrap();
        g.gather_rows(s, vec![1, 1, 0]).unwrap()
    });
}

#[test]
fn pooling_upsample_reductions() {
    check_expr(0..10, -1.0, 1.0, 1e-5, 1e-4, |g, _| {
        let x = g.param("x", &[3, 4, 4]);
        let up = g.upsample_nearest(x, 2).unwrap();
        let pool = g.global_avg_pool(up).unwrap();
        let sa = g.sum_axis(x, 1).unwrap();
        let ma = g.mean_axis(sa, 0).unwrap();
        let p2 = g.reshape(pool, &[3, 1]).unwrap();
        let m2 = g.reshape(ma, &[1, 4]).unwrap();
        g.mul(p2, m2).unwrap()
    });
}

#[test]
fn scalar_reductions_and_losses() {
    check_expr(0..10, 0.1, 0.9, 1e-5, 1e-4, |g, rng| {
        let x = g.param("x", &[3, 4]);
        let y = g.param("y", &[3, 4]);
        let s = g.sum_all(x);
        let m = g.mean_all(y);
        let e = g.mse(x, y).unwrap();
        let logits = g.param("logits", &[2, 3, 3]);
        let target = g.constant(rand_tensor(rng, &[3, 3], 0.0, 1.0));
        let ce = g.mask_cross_entropy(logits, target).unwrap();
        let a = g.add(s, m).unwrap();
        let b = g.add(e, ce).unwrap();
        let t = g.add(a, b).unwrap();
        g.reshape(t, &[1]).unwrap()
    });
}

#[test]
fn softmax_cross_entropy_composite_tight() {
    // Binary targets keep |p - t| bounded below, so the probe is strict.
    check_expr(0..3, -2.0, 2.0, 1e-4, 1e-6, |g, rng| {
        let logits = g.param("logits", &[2, 4, 4]);
        let target = g.constant(rand_tensor(rng, &[4, 4], 0.0, 1.0).map(|v| v.round()));
        g.mask_cross_entropy(logits, target).unwrap()
    });
}

#[test]
fn cross_entropy_gradient_flows_to_soft_target() {
    check_expr(0..5, 0.1, 0.9, 1e-5, 1e-4, |g, rng| {
        let target = g.param("target", &[3, 3]);
        let logits = g.constant(rand_tensor(rng, &[2, 3, 3], -2.0, 2.0));
        g.mask_cross_entropy(logits, target).unwrap()
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &[3]);
    let d = g.detach(x);
    let y = g.mul(d, x).unwrap();
    let out = g.sum_all(y);

    let mut vals = Values::new(&g);
    vals.bind(&g, x, Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    g.forward(&mut vals).unwrap();
    let mut grads = GradStore::new(&g);
    g.backward(&vals, out, &mut grads).unwrap();
    // d(sum(detach(x) * x))/dx = detach(x) = x values, not 2x.
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn accumulate_semantics_double_on_second_backward() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &[4]);
    let sq = g.square(x);
    let out = g.sum_all(sq);

    let mut vals = Values::new(&g);
    vals.bind(&g, x, Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0])).unwrap();
    g.forward(&mut vals).unwrap();

    let mut grads = GradStore::new(&g);
    g.backward(&vals, out, &mut grads).unwrap();
    let once: Vec<f64> = grads.get(x).unwrap().data().to_vec();
    g.backward(&vals, out, &mut grads).unwrap();
    let twice: Vec<f64> = grads.get(x).unwrap().data().to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(*b, 2.0 * *a);
    }
    grads.zero();
    assert!(grads.get(x).is_none());
}

#[test]
fn sum_gradient_is_ones_and_mse_min_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &[2, 3]);
    let out = g.sum_all(x);
    let mut vals = Values::new(&g);
    vals.bind(&g, x, Tensor::full(&[2, 3], 0.7)).unwrap();
    g.forward(&mut vals).unwrap();
    let mut grads = GradStore::new(&g);
    g.backward(&vals, out, &mut grads).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g2 = Graph::<f64>::new();
    let x2 = g2.param("x", &[5]);
    let x0 = g2.constant(Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
    let loss = g2.mse(x2, x0).unwrap();
    let mut vals2 = Values::new(&g2);
    vals2.bind(&g2, x2, Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5])).unwrap();
    g2.forward(&mut vals2).unwrap();
    let mut grads2 = GradStore::new(&g2);
    g2.backward(&vals2, loss, &mut grads2).unwrap();
    assert!(grads2.get(x2).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_primitives_satisfy_superposition() {
    // forward(a*x + b*y) = a*forward(x) + b*forward(y) for conv, linear,
    // pooling, and concat.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (1.3f64, -0.6f64);

    let run = |x: &Tensor<f64>| -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let xin = g.input("x", &[2, 6, 6]);
        let w = g.constant(Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let bias = g.constant(Tensor::zeros(&[3]));
        let c = g.conv2d(xin, w, bias, 1, 1).unwrap();
        let cat = g.concat(&[c, c], 0).unwrap();
        let pool = g.global_avg_pool(cat).unwrap();
        let lw = g.constant(Tensor::new(&[4, 6], (0..24).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap());
        let lb = g.constant(Tensor::zeros(&[4]));
        let out = g.linear(pool, lw, lb).unwrap();
        let mut vals = Values::new(&g);
        vals.bind(&g, xin, x.clone()).unwrap();
        g.forward(&mut vals).unwrap();
        vals.value(out).clone()
    };

    let x = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let mixed = Tensor::new(
        &[2, 6, 6],
        x.data().iter().zip(y.data()).map(|(&xv, &yv)| a * xv + b * yv).collect(),
    )
    .unwrap();
    let lhs = run(&mixed);
    let fx = run(&x);
    let fy = run(&y);
    let rhs = Tensor::new(&[4], fx.data().iter().zip(fy.data()).map(|(&u, &v)| a * u + b * v).collect()).unwrap();
    assert!(lhs.max_rel_err(&rhs, 1.0) < 1e-5);
}

#[test]
fn forward_is_deterministic_bitwise() {
    let build_and_run = || -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[2, 8, 8]);
        let w = g.param("w", &[4, 2, 3, 3]);
        let b = g.param("b", &[4]);
        let c = g.conv2d(x, w, b, 2, 1).unwrap();
        let r = g.relu(c);
        let out = g.mean_all(r);
        let mut vals = Values::new(&g);
        for (_, id) in g.leaves_of(handkit::graph::LeafKind::Param) {
            let t = rand_tensor(&mut rng, &g.shape(id).to_vec(), -1.0, 1.0);
            vals.bind(&g, id, t).unwrap();
        }
        g.forward(&mut vals).unwrap();
        let mut grads = GradStore::new(&g);
        g.backward(&vals, out, &mut grads).unwrap();
        let mut bits: Vec<u64> = vals.value(out).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(grads.get(w).unwrap().data().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(build_and_run(), build_and_run());
}

#[test]
fn nonfinite_forward_names_the_node() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &[2]);
    let l = g.log(x);
    let _ = g.sum_all(l);
    let mut vals = Values::new(&g);
    vals.bind(&g, x, Tensor::from_vec(vec![1.0, -1.0])).unwrap();
    let err = g.forward(&mut vals).unwrap_err();
    match err {
        handkit::Error::NonFinite { op, .. } => assert!(op.contains("log")),
        other => panic!("wrong error: {other}"),
    }
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &[3]);
    let y = g.square(x);
    let mut vals = Values::new(&g);
    vals.bind(&g, x, Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    g.forward(&mut vals).unwrap();
    let mut grads = GradStore::new(&g);
    assert!(g.backward(&vals, y, &mut grads).is_err());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[5]);
    let s = g.softmax(x, 0).unwrap();
    let mut vals = Values::new(&g);
    vals.bind(&g, x, Tensor::zeros(&[5])).unwrap();
    g.forward(&mut vals).unwrap();
    for &v in vals.value(s).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn f32_and_f64_paths_agree() {
    // The same composite graph evaluated at both widths must agree to 1e-4
    // relative; this is the check that the f64 oracle speaks for the f32 path.
    fn build<T: handkit::Real>(data: &[f64]) -> Vec<f64> {
        let mut g = Graph::<T>::new();
        let x = g.input("x", &[2, 8, 8]);
        let w = g.constant(Tensor::new(&[4, 2, 5, 5], (0..200).map(|i| T::from_f64((i as f64 * 0.173).sin() * 0.2)).collect()).unwrap());
        let b = g.constant(Tensor::zeros(&[4]));
        let c = g.conv2d(x, w, b, 2, 2).unwrap();
        let r = g.relu(c);
        let s = g.sigmoid(r);
        let p = g.global_avg_pool(s).unwrap();
        let sm = g.softmax(p, 0).unwrap();
        let mut vals = Values::new(&g);
        vals.bind(&g, x, Tensor::new(&[2, 8, 8], data.iter().map(|&v| T::from_f64(v)).collect()).unwrap()).unwrap();
        g.forward(&mut vals).unwrap();
        vals.value(sm).data().iter().map(|v| v.to_f64()).collect()
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lo = build::<f32>(&data);
    let hi = build::<f64>(&data);
    for (a, b) in lo.iter().zip(&hi) {
        let rel = (a - b).abs() / b.abs().max(1e-6);
        assert!(rel < 1e-4, "{a} vs {b}");
    }
}
