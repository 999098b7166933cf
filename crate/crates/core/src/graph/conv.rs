//! 2D convolution via im2col and GEMM. Single image, layout [C,H,W].

use super::op::conv2d_out_dims;
use crate::{Real, Tensor};

/// Unfold x [Cin,H,W] into [Cin*kh*kw, Ho*Wo], zero-padding out-of-bounds taps.
fn im2col<T: Real>(x: &Tensor<T>, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = ho * wo;
    let mut cols = vec![T::ZERO; cin * kh * kw * m];
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * m;
                for oi in 0..ho {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let src = (c * h + yi as usize) * w;
                    let dst = row + oi * wo;
                    for oj in 0..wo {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        cols[dst + oj] = x.data()[src + xj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the input image.
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<T> {
    let m = ho * wo;
    let mut out = Tensor::zeros(&[cin, h, w]);
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * m;
                for oi in 0..ho {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let dst = (c * h + yi as usize) * w;
                    let src = row + oi * wo;
                    for oj in 0..wo {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        out.data_mut()[dst + xj as usize] += cols[src + oj];
                    }
                }
            }
        }
    }
    out
}

fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(super) fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = conv2d_out_dims(h, wid, kh, kw, stride, pad).expect("shape checked at build");
    let k = cin * kh * kw;
    let m = ho * wo;
    let cols = im2col(x, kh, kw, stride, pad, ho, wo);
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    T::gemm(cout, k, m, T::ONE, w.data(), &cols, T::ZERO, out.data_mut());
    for c in 0..cout {
        let bias = b.data()[c];
        for v in &mut out.data_mut()[c * m..(c + 1) * m] {
            *v += bias;
        }
    }
    out
}

/// Gradients (dx, dw, db) for the forward above. Recomputes im2col.
pub(super) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (grad_out.shape()[1], grad_out.shape()[2]);
    let k = cin * kh * kw;
    let m = ho * wo;

    let mut db = Tensor::zeros(&[cout]);
    for c in 0..cout {
        let mut s = T::ZERO;
        for &v in &grad_out.data()[c * m..(c + 1) * m] {
            s += v;
        }
        db.data_mut()[c] = s;
    }

    let cols = im2col(x, kh, kw, stride, pad, ho, wo);
    let cols_t = transpose(&cols, k, m);
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(cout, m, k, T::ONE, grad_out.data(), &cols_t, T::ZERO, dw.data_mut());

    let w_t = transpose(w.data(), cout, k);
    let mut dcols = vec![T::ZERO; k * m];
    T::gemm(k, cout, m, T::ONE, &w_t, grad_out.data(), T::ZERO, &mut dcols);
    let dx = col2im(&dcols, cin, h, wid, kh, kw, stride, pad, ho, wo);

    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (ho, wo) = conv2d_out_dims(h, wid, kh, kw, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut s = b.data()[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let yi = (oi * stride + ki) as isize - pad as isize;
                                let xj = (oj * stride + kj) as isize - pad as isize;
                                if yi < 0 || yi >= h as isize || xj < 0 || xj >= wid as isize {
                                    continue;
                                }
                                s += x.at(&[ci, yi as usize, xj as usize]) * w.at(&[co, ci, ki, kj]);
                            }
                        }
                    }
                    out.data_mut()[(co * ho + oi) * wo + oj] = s;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_naive() {
        let mut state = 0x12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for &(stride, pad) in &[(1usize, 0usize), (1, 2), (2, 3), (3, 1)] {
            let x = Tensor::new(&[3, 9, 8], (0..3 * 9 * 8).map(|_| next()).collect()).unwrap();
            let w = Tensor::new(&[4, 3, 3, 3], (0..4 * 3 * 3 * 3).map(|_| next()).collect()).unwrap();
            let b = Tensor::new(&[4], (0..4).map(|_| next()).collect()).unwrap();
            let fast = conv2d_forward(&x, &w, &b, stride, pad);
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_rel_err(&slow, 1e-9) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::new(&[1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0);
        assert_eq!(y.data(), x.data());
    }
}
