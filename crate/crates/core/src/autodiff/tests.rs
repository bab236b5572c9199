use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::gradcheck::{finite_diff, max_rel_err};
use super::*;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-6;

fn rand_array(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Check d(scalar)/d(input) for a function of one differentiable input.
fn check_grad(x: &ArrayD<f64>, build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId) -> f64 {
    let mut tape = Tape::new();
    let xin = tape.input(x.clone());
    let loss = build(&mut tape, xin);
    let grads = tape.backward(loss);
    let analytic = grads.wrt(xin).expect("input grad").clone();
    let numeric = finite_diff(x, STEP, |probe| {
        let mut t = Tape::new();
        let xin = t.input(probe.clone());
        let loss = build(&mut t, xin);
        t.scalar(loss)
    });
    max_rel_err(&analytic, &numeric)
}

#[test]
fn elementwise_arithmetic_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let x = rand_array(&mut rng, &[3, 5], 0.3, 1.2);
    let y = rand_array(&mut rng, &[3, 5], 0.4, 1.5);

    let err = check_grad(&x, |t, xin| {
        let c = t.constant(y.clone());
        let a = t.mul(xin, c);
        let b = t.add(a, xin);
        let d = t.div(b, c);
        let e = t.sub(d, xin);
        let f = t.scale(e, 1.7);
        let g = t.add_scalar(f, 0.3);
        t.mean_all(g)
    });
    assert!(err < TOL, "arith grad err {err}");
}

#[test]
fn activation_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    // keep values away from the relu/abs kink at 0
    let base = rand_array(&mut rng, &[4, 4], 0.2, 1.0);
    let signs = rand_array(&mut rng, &[4, 4], 0.0, 1.0).mapv(|v| if v > 0.5 { 1.0 } else { -1.0 });
    let x = &base * &signs;

    for (name, f) in [
        ("leaky", 0usize),
        ("sigmoid", 1),
        ("softplus", 2),
        ("tanh", 3),
        ("abs", 4),
    ] {
        let err = check_grad(&x, |t, xin| {
            let y = match f {
                0 => t.leaky_relu(xin, 0.2),
                1 => t.sigmoid(xin),
                2 => t.softplus(xin),
                3 => t.tanh(xin),
                _ => t.abs(xin),
            };
            t.sum_all(y)
        });
        assert!(err < TOL, "{name} grad err {err}");
    }
}

#[test]
fn conv2d_forward_matches_direct_loops() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let x = rand_array(&mut rng, &[3, 7, 6], -1.0, 1.0);
        let w = rand_array(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.constant(w.clone());
        let out = tape.conv2d(xn, wn, stride, pad);

        // direct nested-loop reference
        let ho = (7 + 2 * pad - 3) / stride + 1;
        let wo = (6 + 2 * pad - 3) / stride + 1;
        for co in 0..4 {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let si = (oi * stride + ki) as isize - pad as isize;
                                let sj = (oj * stride + kj) as isize - pad as isize;
                                if si >= 0 && si < 7 && sj >= 0 && sj < 6 {
                                    acc += x[[ci, si as usize, sj as usize]]
                                        * w[[co, ci, ki, kj]];
                                }
                            }
                        }
                    }
                    let got = tape.value(out)[[co, oi, oj]];
                    assert!(
                        (got - acc).abs() <= 1e-12 * acc.abs().max(1.0),
                        "conv mismatch at ({co},{oi},{oj}): {got} vs {acc}"
                    );
                }
            }
        }
    }
}

#[test]
fn conv2d_grads_wrt_input_and_weight() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let x = rand_array(&mut rng, &[2, 6, 5], -1.0, 1.0);
    let w = rand_array(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);

    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        let err = check_grad(&x, |t, xin| {
            let wn = t.constant(w.clone());
            let y = t.conv2d(xin, wn, stride, pad);
            let y = t.tanh(y);
            t.mean_all(y)
        });
        assert!(err < TOL, "conv gx err {err} (stride {stride})");

        let err = check_grad(&w, |t, win| {
            let xn = t.constant(x.clone());
            let y = t.conv2d(xn, win, stride, pad);
            let y = t.tanh(y);
            t.mean_all(y)
        });
        assert!(err < TOL, "conv gw err {err} (stride {stride})");
    }
}

#[test]
fn bias_matvec_concat_slice_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x = rand_array(&mut rng, &[3, 4, 4], -1.0, 1.0);
    let b = rand_array(&mut rng, &[3], -0.5, 0.5);
    let err = check_grad(&x, |t, xin| {
        let bn = t.constant(b.clone());
        let y = t.bias_add(xin, bn);
        t.mean_all(y)
    });
    assert!(err < TOL, "bias gx err {err}");
    let err = check_grad(&b, |t, bin| {
        let xn = t.constant(x.clone());
        let y = t.bias_add(xn, bin);
        let y = t.tanh(y);
        t.mean_all(y)
    });
    assert!(err < TOL, "bias gb err {err}");

    let w = rand_array(&mut rng, &[4, 6], -0.5, 0.5);
    let v = rand_array(&mut rng, &[6], -1.0, 1.0);
    let err = check_grad(&v, |t, vin| {
        let wn = t.constant(w.clone());
        let y = t.matvec(wn, vin);
        let y = t.sigmoid(y);
        t.sum_all(y)
    });
    assert!(err < TOL, "matvec gx err {err}");
    let err = check_grad(&w, |t, win| {
        let vn = t.constant(v.clone());
        let y = t.matvec(win, vn);
        let y = t.sigmoid(y);
        t.sum_all(y)
    });
    assert!(err < TOL, "matvec gw err {err}");

    let a = rand_array(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let err = check_grad(&a, |t, ain| {
        let cn = t.constant(rand_array(&mut ChaCha12Rng::seed_from_u64(9), &[1, 3, 3], -1.0, 1.0));
        let y = t.concat(ain, cn, 0);
        let z = t.slice_axis(y, 0, 1, 3);
        let z = t.tanh(z);
        t.mean_all(z)
    });
    assert!(err < TOL, "concat/slice grad err {err}");
}

#[test]
fn pooling_and_upsample_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let x = rand_array(&mut rng, &[2, 6, 6], -1.0, 1.0);

    let err = check_grad(&x, |t, xin| {
        let y = t.upsample2x(xin);
        let y = t.tanh(y);
        t.mean_all(y)
    });
    assert!(err < TOL, "upsample grad err {err}");

    let err = check_grad(&x, |t, xin| {
        let y = t.adaptive_max_pool(xin, 3, 2);
        let y = t.tanh(y);
        t.mean_all(y)
    });
    assert!(err < TOL, "maxpool grad err {err}");

    let err = check_grad(&x, |t, xin| {
        let y = t.global_avg_pool(xin);
        let y = t.tanh(y);
        t.sum_all(y)
    });
    assert!(err < TOL, "gap grad err {err}");

    let wch = rand_array(&mut rng, &[2], 0.3, 0.9);
    let err = check_grad(&x, |t, xin| {
        let wn = t.constant(wch.clone());
        let y = t.channel_scale(xin, wn);
        t.mean_all(y)
    });
    assert!(err < TOL, "chscale gx err {err}");
    let err = check_grad(&wch, |t, win| {
        let xn = t.constant(x.clone());
        let y = t.channel_scale(xn, win);
        let y = t.tanh(y);
        t.mean_all(y)
    });
    assert!(err < TOL, "chscale gw err {err}");
}

#[test]
fn adaptive_max_pool_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    let y = tape.adaptive_max_pool(x, 1, 1);
    assert_eq!(tape.value(y)[[0, 0, 0]], 4.0);

    let c = tape.constant(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.7));
    let y = tape.adaptive_max_pool(c, 2, 2);
    assert!(tape.value(y).iter().all(|&v| v == 0.7));
}

#[test]
fn warp_grads_wrt_image_and_field() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let img = rand_array(&mut rng, &[2, 6, 6], -1.0, 1.0);
    // fractional offsets well inside (0, 1) keep the check away from
    // the bilinear kinks at integer sample positions
    let field = rand_array(&mut rng, &[2, 6, 6], 0.15, 0.45);

    let err = check_grad(&img, |t, iin| {
        let fnode = t.constant(field.clone());
        let y = t.warp(iin, fnode);
        let y = t.tanh(y);
        t.mean_all(y)
    });
    assert!(err < TOL, "warp g_img err {err}");

    let err = check_grad(&field, |t, fin| {
        let inode = t.constant(img.clone());
        let y = t.warp(inode, fin);
        let y = t.tanh(y);
        t.mean_all(y)
    });
    assert!(err < TOL, "warp g_field err {err}");
}

#[test]
fn smoothness_normalize_dot_grads() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let field = rand_array(&mut rng, &[2, 5, 5], -2.0, 2.0);
    let err = check_grad(&field, |t, fin| t.smoothness(fin));
    assert!(err < TOL, "smoothness grad err {err}");

    let v = rand_array(&mut rng, &[8], 0.2, 1.0);
    let other = rand_array(&mut rng, &[8], -1.0, 1.0);
    let err = check_grad(&v, |t, vin| {
        let y = t.normalize(vin);
        let c = t.constant(other.clone());
        t.dot(y, c)
    });
    assert!(err < TOL, "normalize/dot grad err {err}");
}

#[test]
fn var_bindings_accumulate_gradients() {
    let mut store = VarStore::<f64>::new();
    let w = store.add("w", ArrayD::from_elem(IxDyn(&[3]), 2.0));

    let mut tape = Tape::new();
    let w1 = tape.var(&store, w);
    let w2 = tape.var(&store, w);
    let y = tape.mul(w1, w2); // y = w^2 elementwise, bound twice
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss);
    let gw = grads.of_var(&store, w);
    // d/dw sum(w*w) = 2w = 4 for each element
    for &g in gw.iter() {
        assert!((g - 4.0).abs() < 1e-12);
    }
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = VarStore::<f64>::new();
    let w = store.add("w", ArrayD::from_elem(IxDyn(&[4]), 3.0));
    let target = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, -2.0, 0.5, 0.0]).unwrap();
    let mut opt = Adam::new(0.05, &store);
    for _ in 0..800 {
        let mut tape = Tape::new();
        let wn = tape.var(&store, w);
        let t = tape.constant(target.clone());
        let d = tape.sub(wn, t);
        let sq = tape.mul(d, d);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let all = grads.all_vars(&store);
        opt.step(&mut store, &all);
    }
    for (a, b) in store.get(w).iter().zip(target.iter()) {
        assert!((a - b).abs() < 1e-3, "adam did not converge: {a} vs {b}");
    }
}

#[test]
fn frozen_weights_still_pass_gradients_through() {
    let mut store = VarStore::<f64>::new();
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let w = store.add("w", rand_array(&mut rng, &[2, 2, 3, 3], -0.5, 0.5));
    let x = rand_array(&mut rng, &[2, 5, 5], -1.0, 1.0);

    let err = check_grad(&x, |t, xin| {
        let wn = t.frozen(&store, w);
        let y = t.conv2d(xin, wn, 1, 1);
        let y = t.tanh(y);
        t.mean_all(y)
    });
    assert!(err < TOL, "grad through frozen conv err {err}");

    // and the frozen weight itself receives no gradient
    let mut tape = Tape::new();
    let xin = tape.input(x);
    let wn = tape.frozen(&store, w);
    let y = tape.conv2d(xin, wn, 1, 1);
    let loss = tape.mean_all(y);
    let grads = tape.backward(loss);
    assert!(grads.wrt(wn).is_none());
}
