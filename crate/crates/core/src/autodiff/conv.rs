//! im2col-based 2-d convolution forward and backward.

use ndarray::{Array2, ArrayD, IxDyn};

use super::Scalar;

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold `(C, H, W)` into a `(C*kh*kw, Ho*Wo)` patch matrix with zero padding.
fn im2col<A: Scalar>(
    x: &ArrayD<A>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<A> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(w, kw, stride, pad);
    let mut cols = Array2::<A>::zeros((c * kh * kw, ho * wo));
    let xs = x.as_slice().expect("conv input must be standard layout");
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = (ch * h + si as usize) * w;
                    for oj in 0..wo {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = xs[base + sj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `(C*kh*kw, Ho*Wo)` patch-gradient matrix back onto `(C, H, W)`.
fn col2im<A: Scalar>(
    gcols: &Array2<A>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<A> {
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(w, kw, stride, pad);
    let mut gx = ArrayD::<A>::zeros(IxDyn(&[c, h, w]));
    let gs = gx.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = (ch * h + si as usize) * w;
                    for oj in 0..wo {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        gs[base + sj as usize] += gcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    gx
}

/// Returns the `(C_out, Ho, Wo)` output and the cached patch matrix.
pub fn conv2d_forward<A: Scalar>(
    x: &ArrayD<A>,
    w: &ArrayD<A>,
    stride: usize,
    pad: usize,
) -> (ArrayD<A>, Array2<A>) {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv input must be (C, H, W)");
    assert_eq!(ws.len(), 4, "conv weight must be (C_out, C_in, kh, kw)");
    assert_eq!(xs[0], ws[1], "conv channel mismatch");
    let (cin, h, width) = (xs[0], xs[1], xs[2]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    assert!(h + 2 * pad >= kh && width + 2 * pad >= kw, "kernel larger than padded input");
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(width, kw, stride, pad);

    let cols = im2col(x, kh, kw, stride, pad);
    let w2 = w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("weight reshape");
    let out2 = w2.dot(&cols);
    let out = out2
        .into_shape_with_order(IxDyn(&[cout, ho, wo]))
        .expect("output reshape");
    (out, cols)
}

/// Gradients with respect to the input and the weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<A: Scalar>(
    gout: &ArrayD<A>,
    x: &ArrayD<A>,
    w: &ArrayD<A>,
    stride: usize,
    pad: usize,
    cols: &Array2<A>,
    need_gx: bool,
    need_gw: bool,
) -> (Option<ArrayD<A>>, Option<ArrayD<A>>) {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, h, width) = (xs[0], xs[1], xs[2]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let g2 = gout
        .view()
        .into_shape_with_order((cout, gout.len() / cout))
        .expect("grad reshape");

    let gw = if need_gw {
        let gw2 = g2.dot(&cols.t());
        Some(
            gw2.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                .expect("gw reshape"),
        )
    } else {
        None
    };

    let gx = if need_gx {
        let w2 = w
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight reshape");
        let gcols = w2.t().dot(&g2);
        Some(col2im(&gcols, cin, h, width, kh, kw, stride, pad))
    } else {
        None
    };

    (gx, gw)
}
