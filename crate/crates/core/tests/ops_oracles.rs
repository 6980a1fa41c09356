//! Tape operations against brute-force loop oracles and finite differences.

use agkit::gradcheck::{check_gradients, GradCheckConfig};
use agkit::params::{rng_for, ParamStore};
use agkit::tape::{BnMode, Elementwise, Reduction, RunningStats, SoftmaxAxis};
use agkit::{Error, Shape, Tape, Tensor};
use rand::Rng;

fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut rng_for(seed, "oracle"))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- oracles -------------------------------------------------------------

fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    s += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(n, co, oy, ox) = s;
                }
            }
        }
    }
    out
}

fn maxpool_oracle(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let s = x.shape();
    let oh = (s.h - k) / stride + 1;
    let ow = (s.w - k) / stride + 1;
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, oy, ox| {
        let mut window = Vec::new();
        for ky in 0..k {
            for kx in 0..k {
                window.push(x.at(n, c, oy * stride + ky, ox * stride + kx));
            }
        }
        window.into_iter().fold(f64::NEG_INFINITY, f64::max)
    })
}

fn bilinear_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    let coord = |d: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let src = ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64);
        let lo = src.floor() as usize;
        let hi = if lo + 1 < inn { lo + 1 } else { lo };
        (lo, hi, src - lo as f64)
    };
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        let (y0, y1, fy) = coord(y, s.h, oh);
        let (x0, x1, fx) = coord(xx, s.w, ow);
        x.at(n, c, y0, x0) * (1.0 - fy) * (1.0 - fx)
            + x.at(n, c, y0, x1) * (1.0 - fy) * fx
            + x.at(n, c, y1, x0) * fy * (1.0 - fx)
            + x.at(n, c, y1, x1) * fy * fx
    })
}

fn reduce_oracle(x: &Tensor, avg: bool) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut acc = 0.0;
        for y in 0..s.h {
            for xx in 0..s.w {
                acc += x.at(n, c, y, xx);
            }
        }
        if avg {
            acc / (s.h * s.w) as f64
        } else {
            acc
        }
    })
}

// ---- elementwise ---------------------------------------------------------

#[test]
fn sigmoid_of_zero_is_half() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let y = t.elementwise(Elementwise::Sigmoid, x, None).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.5));
}

#[test]
fn channel_broadcast_identity_gate() {
    let mut t = Tape::new();
    let xv = rand_tensor(Shape::new(1, 2, 2, 2), 1);
    let x = t.constant(xv.clone());
    let a = t.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let y = t.elementwise(Elementwise::Mul, x, Some(a)).unwrap();
    assert_eq!(t.value(y), &xv);
}

#[test]
fn relu_negative_value_and_gradient() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::scalar(-3.2));
    let y = t.relu(x);
    assert_eq!(t.value(y).data()[0], 0.0);
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(x).map(|g| g.data()[0]).unwrap_or(0.0), 0.0);
}

#[test]
fn broadcast_mismatch_reports_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    let b = t.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
    let err = t.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(1, 2, 3, 3)") && msg.contains("(1, 2, 2, 2)"), "{msg}");
}

// ---- conv2d --------------------------------------------------------------

#[test]
fn conv_scalar_scaling() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(Shape::new(1, 1, 3, 3), 3.0));
    let w = t.constant(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
    let b = t.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 6.0));
}

#[test]
fn conv_window_sum() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
    let w = t.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(t.value(y).at(0, 0, 1, 1), 9.0);
    assert_eq!(t.value(y).at(0, 0, 0, 0), 4.0);
}

#[test]
fn conv_rejects_oversized_kernel_and_channel_mismatch() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let w = t.constant(Tensor::ones(Shape::new(1, 1, 5, 5)));
    assert!(t.conv2d(x, w, None, 1, 1).is_err());
    let w2 = t.constant(Tensor::ones(Shape::new(1, 3, 1, 1)));
    assert!(matches!(t.conv2d(x, w2, None, 1, 0), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = rng_for(11, "conv-cases");
    for case in 0..60 {
        let h = rng.random_range(3..=8);
        let w = rng.random_range(3..=8);
        let k = rng.random_range(1..=3.min(h).min(w));
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2 + 1);
        let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let xv = rand_tensor(Shape::new(n, ci, h, w), case);
        let wv = rand_tensor(Shape::new(co, ci, k, k), 1000 + case);
        let bv = rand_tensor(Shape::new(1, co, 1, 1), 2000 + case);
        let mut t = Tape::new();
        let (x, wk, b) = (t.constant(xv.clone()), t.constant(wv.clone()), t.constant(bv.clone()));
        let y = t.conv2d(x, wk, Some(b), stride, pad).unwrap();
        let expect = conv_oracle(&xv, &wv, bv.data(), stride, pad);
        assert!(max_diff(t.value(y), &expect) < 1e-12, "case {case}");
    }
}

// ---- pooling -------------------------------------------------------------

#[test]
fn maxpool_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);
    assert!(t.max_pool2d(x, 0, 1).is_err());
    assert!(t.max_pool2d(x, 2, 0).is_err());
}

#[test]
fn maxpool_tie_routes_to_first_element() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::full(Shape::new(1, 1, 4, 4), 0.5));
    let y = t.max_pool2d(x, 2, 2).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.5));
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    let gx = g.wrt(x).unwrap();
    for yy in 0..4 {
        for xx in 0..4 {
            let expect = if yy % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(gx.at(0, 0, yy, xx), expect);
        }
    }
}

#[test]
fn maxpool_matches_window_oracle() {
    let mut rng = rng_for(12, "pool-cases");
    for case in 0..60 {
        let h = rng.random_range(2..=8);
        let w = rng.random_range(2..=8);
        let k = rng.random_range(1..=2.min(h).min(w));
        let stride = rng.random_range(1..=2);
        let xv = rand_tensor(Shape::new(2, 2, h, w), 300 + case);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let y = t.max_pool2d(x, k, stride).unwrap();
        assert!(max_diff(t.value(y), &maxpool_oracle(&xv, k, stride)) == 0.0, "case {case}");
    }
}

// ---- bilinear ------------------------------------------------------------

#[test]
fn upsample_preserves_constants_and_single_pixel() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(Shape::new(1, 2, 3, 3), 1.7));
    let y = t.upsample_bilinear(c, 7, 5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v - 1.7).abs() < 1e-15));
    let one = t.constant(Tensor::full(Shape::new(1, 1, 1, 1), -0.3));
    let y = t.upsample_bilinear(one, 4, 6).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == -0.3));
    assert!(t.upsample_bilinear(one, 0, 3).is_err());
    assert!(t.upsample_bilinear(c, 2, 3).is_err());
}

#[test]
fn upsample_matches_coordinate_oracle() {
    let mut rng = rng_for(13, "up-cases");
    for case in 0..60 {
        let (h, w) = if case == 0 { (2, 2) } else { (rng.random_range(1..=4), rng.random_range(1..=4)) };
        let (oh, ow) = if case == 0 { (4, 4) } else { (h * rng.random_range(1..=3), w + rng.random_range(0..=5)) };
        let xv = rand_tensor(Shape::new(1, 2, h, w), 400 + case);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let y = t.upsample_bilinear(x, oh, ow).unwrap();
        assert!(max_diff(t.value(y), &bilinear_oracle(&xv, oh, ow)) < 1e-12, "case {case}");
    }
}

#[test]
fn upsample_backward_is_transpose() {
    // <U x, y> == <x, U^T y> for random x, y
    let mut rng = rng_for(14, "adjoint");
    for case in 0..20 {
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (oh, ow) = (h * 2, w * 3);
        let xv = rand_tensor(Shape::new(1, 1, h, w), 500 + case);
        let yv = rand_tensor(Shape::new(1, 1, oh, ow), 600 + case);
        let mut t = Tape::new();
        let x = t.variable(xv.clone());
        let u = t.upsample_bilinear(x, oh, ow).unwrap();
        let l = t.weighted_sum(u, &yv).unwrap();
        let lhs = t.value(l).data()[0];
        let g = t.backward(l).unwrap();
        let rhs: f64 = g.wrt(x).unwrap().data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

// ---- softmax / reduce / concat / linear ---------------------------------

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let eq = t.constant(Tensor::full(Shape::new(1, 4, 1, 1), 0.3));
    let y = t.softmax(eq, SoftmaxAxis::Channel).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let x = t.constant(Tensor::new(Shape::new(1, 1, 1, 2), vec![0.0, 3f64.ln()]).unwrap());
    let y = t.softmax(x, SoftmaxAxis::Spatial).unwrap();
    assert!((t.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((t.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_sums_to_one_and_is_shift_invariant() {
    for case in 0..50 {
        let xv = rand_tensor(Shape::new(2, 3, 4, 5), 700 + case);
        for axis in [SoftmaxAxis::Channel, SoftmaxAxis::Spatial] {
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let y = t.softmax(x, axis).unwrap();
            let shifted = t.constant(xv.map(|v| v + 123.25));
            let ys = t.softmax(shifted, axis).unwrap();
            assert!(max_diff(t.value(y), t.value(ys)) < 1e-14);
            let v = t.value(y);
            match axis {
                SoftmaxAxis::Spatial => {
                    for n in 0..2 {
                        for c in 0..3 {
                            assert!((v.plane(n, c).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                        }
                    }
                }
                SoftmaxAxis::Channel => {
                    for n in 0..2 {
                        for yy in 0..4 {
                            for xx in 0..5 {
                                let s: f64 = (0..3).map(|c| v.at(n, c, yy, xx)).sum();
                                assert!((s - 1.0).abs() < 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn reduce_examples_and_oracle() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(Shape::new(1, 3, 4, 4), 2.5));
    let g = t.reduce(Reduction::GlobalAvgPool, c).unwrap();
    assert!(t.value(g).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    let ones = t.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let s = t.reduce(Reduction::SpatialSum, ones).unwrap();
    assert_eq!(t.value(s).data(), &[4.0]);
    for case in 0..50 {
        let xv = rand_tensor(Shape::new(2, 3, 1 + case % 8, 1 + (case * 7) % 8), 800 + case as u64);
        let x = t.constant(xv.clone());
        let a = t.reduce(Reduction::GlobalAvgPool, x).unwrap();
        let s = t.reduce(Reduction::SpatialSum, x).unwrap();
        assert!(max_diff(t.value(a), &reduce_oracle(&xv, true)) < 1e-12);
        assert!(max_diff(t.value(s), &reduce_oracle(&xv, false)) < 1e-12);
    }
}

#[test]
fn concat_shapes_and_slices() {
    let mut t = Tape::new();
    let av = rand_tensor(Shape::new(1, 2, 4, 4), 1);
    let bv = rand_tensor(Shape::new(1, 3, 4, 4), 2);
    let (a, b) = (t.constant(av.clone()), t.constant(bv.clone()));
    let y = t.channel_concat(&[a, b]).unwrap();
    assert_eq!(t.shape(y), Shape::new(1, 5, 4, 4));
    let one = t.channel_concat(&[a]).unwrap();
    assert_eq!(t.value(one), &av);
    let sa = t.slice_channels(y, 0, 2).unwrap();
    let sb = t.slice_channels(y, 2, 3).unwrap();
    assert_eq!(t.value(sa), &av);
    assert_eq!(t.value(sb), &bv);
    let odd = t.constant(Tensor::zeros(Shape::new(1, 1, 3, 4)));
    assert!(t.channel_concat(&[a, odd]).is_err());
}

#[test]
fn linear_examples_and_oracle() {
    let mut t = Tape::new();
    let xv = rand_tensor(Shape::new(2, 3, 1, 1), 5);
    let x = t.constant(xv.clone());
    let eye = t.constant(Tensor::from_fn(Shape::new(3, 3, 1, 1), |i, j, _, _| if i == j { 1.0 } else { 0.0 }));
    let zb = t.constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
    let y = t.linear(x, eye, zb).unwrap();
    assert_eq!(t.value(y), &xv);
    let zw = t.constant(Tensor::zeros(Shape::new(3, 2, 1, 1)));
    let bias = t.constant(Tensor::new(Shape::new(1, 2, 1, 1), vec![0.5, -1.0]).unwrap());
    let y = t.linear(x, zw, bias).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -1.0, 0.5, -1.0]);
    let bad = t.constant(Tensor::zeros(Shape::new(4, 2, 1, 1)));
    assert!(t.linear(x, bad, bias).is_err());
    for case in 0..50 {
        let (fi, fo) = (1 + case % 5, 1 + case % 3);
        let xv = rand_tensor(Shape::new(3, fi, 1, 1), 900 + case as u64);
        let wv = rand_tensor(Shape::new(fi, fo, 1, 1), 950 + case as u64);
        let bv = rand_tensor(Shape::new(1, fo, 1, 1), 990 + case as u64);
        let (x, w, b) = (t.constant(xv.clone()), t.constant(wv.clone()), t.constant(bv.clone()));
        let y = t.linear(x, w, b).unwrap();
        let expect = Tensor::from_fn(Shape::new(3, fo, 1, 1), |n, j, _, _| {
            bv.data()[j] + (0..fi).map(|i| xv.at(n, i, 0, 0) * wv.at(i, j, 0, 0)).sum::<f64>()
        });
        assert!(max_diff(t.value(y), &expect) < 1e-12);
    }
}

// ---- batch norm ----------------------------------------------------------

#[test]
fn batch_norm_train_standardizes() {
    let xv = Tensor::uniform(Shape::new(4, 2, 5, 5), -300.0, 300.0, &mut rng_for(3, "bn"));
    let mut t = Tape::new();
    let x = t.constant(xv);
    let gamma = t.constant(Tensor::new(Shape::new(1, 2, 1, 1), vec![1.5, 0.5]).unwrap());
    let beta = t.constant(Tensor::new(Shape::new(1, 2, 1, 1), vec![-1.0, 2.0]).unwrap());
    let mut stats = RunningStats::new(2);
    let y = t.batch_norm(x, gamma, beta, BnMode::Train, &mut stats).unwrap();
    let v = t.value(y);
    for (c, (g, b)) in [(1.5, -1.0), (0.5, 2.0)].into_iter().enumerate() {
        let vals: Vec<f64> = (0..4).flat_map(|n| v.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((mean - b).abs() < 1e-6);
        assert!((std - g).abs() < 1e-6, "std {std}");
    }
}

#[test]
fn batch_norm_constant_input_and_eval_formula() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(Shape::new(2, 1, 3, 3), 4.0));
    let gamma = t.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
    let beta = t.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let mut stats = RunningStats::new(1);
    let y = t.batch_norm(x, gamma, beta, BnMode::Train, &mut stats).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    // running stats moved by momentum 0.1 toward (4, 0)
    assert!((stats.mean[0] - 0.4).abs() < 1e-15);
    assert!((stats.var[0] - 0.9).abs() < 1e-15);

    let xv = rand_tensor(Shape::new(1, 2, 3, 3), 9);
    let xe = t.constant(xv.clone());
    let g2 = t.constant(Tensor::new(Shape::new(1, 2, 1, 1), vec![2.0, -1.0]).unwrap());
    let b2 = t.constant(Tensor::new(Shape::new(1, 2, 1, 1), vec![0.1, 0.2]).unwrap());
    let mut s2 = RunningStats {
        mean: vec![0.3, -0.2],
        var: vec![1.5, 0.25],
    };
    let y = t.batch_norm(xe, g2, b2, BnMode::Eval, &mut s2).unwrap();
    let expect = Tensor::from_fn(xv.shape(), |n, c, yy, xx| {
        let (g, b, m, v) = [(2.0, 0.1, 0.3, 1.5), (-1.0, 0.2, -0.2, 0.25)][c];
        g * (xv.at(n, c, yy, xx) - m) / (v + 1e-5f64).sqrt() + b
    });
    assert!(max_diff(t.value(y), &expect) < 1e-12);
}

#[test]
fn batch_norm_train_rejects_single_item() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let g = t.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
    let b = t.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    assert!(t.batch_norm(x, g, b, BnMode::Train, &mut RunningStats::new(1)).is_err());
}

// ---- backward ------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones_and_single_use() {
    let mut t = Tape::new();
    let x = t.variable(rand_tensor(Shape::new(1, 2, 3, 3), 4));
    let l = t.sum(x);
    let g = t.backward(l).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.wrt(l).unwrap().data() == [1.0]);
    assert!(matches!(t.backward(l), Err(Error::AlreadyBackpropagated)));
}

#[test]
fn constant_gate_scales_gradient() {
    let xv = rand_tensor(Shape::new(1, 1, 4, 4), 6);
    let alpha = Tensor::uniform(Shape::new(1, 1, 4, 4), 0.0, 1.0, &mut rng_for(6, "alpha"));
    let grad = |gate: &Tensor| {
        let mut t = Tape::new();
        let x = t.variable(xv.clone());
        let f = t.sigmoid(x);
        let a = t.constant(gate.clone());
        let y = t.mul(f, a).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap().wrt(x).unwrap().clone()
    };
    let gated = grad(&alpha);
    let plain = grad(&Tensor::ones(alpha.shape()));
    for i in 0..16 {
        assert!((gated.data()[i] - alpha.data()[i] * plain.data()[i]).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::ones(Shape::new(1, 1, 2, 2)));
    assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
}

// ---- finite differences --------------------------------------------------

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.trainable(*n, t.clone());
    }
    s
}

fn check(p: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> agkit::Result<agkit::Var>) -> f64 {
    let cfg = GradCheckConfig {
        samples: 100,
        ..GradCheckConfig::default()
    };
    let size: usize = p.iter().map(|(_, q)| q.value.len()).sum();
    let r = check_gradients(f, p, &cfg).unwrap();
    assert!(r.checked.len() >= size.min(100), "only {} coordinates checked", r.checked.len());
    r.max_rel_error()
}

fn probe(shape: Shape, seed: u64) -> Tensor {
    rand_tensor(shape, 10_000 + seed)
}

#[test]
fn sigmoid_neuron_gradcheck() {
    let p = store(&[("w", probe(Shape::new(1, 1, 1, 1), 1)), ("b", probe(Shape::new(1, 1, 1, 1), 2))]);
    let x = probe(Shape::new(1, 1, 1, 1), 3);
    let err = check(&p, |t, s| {
        let (w, b) = (s.bind(t, "w")?, s.bind(t, "b")?);
        let xi = t.constant(x.clone());
        let z = t.mul(xi, w)?;
        let z = t.add(z, b)?;
        Ok(t.sigmoid(z))
    });
    assert!(err < 1e-9, "{err}");
}

#[test]
fn maxpool_tie_coordinate_is_excluded_not_failed() {
    // All window entries are equal, so raising a later entry or lowering the
    // first one moves the argmax.
    let p = store(&[("x", Tensor::full(Shape::new(1, 1, 2, 2), 0.5))]);
    let cfg = GradCheckConfig {
        samples: 10,
        max_draws: 10,
        ..GradCheckConfig::default()
    };
    let r = check_gradients(
        |t, s| {
            let x = s.bind(t, "x")?;
            let y = t.max_pool2d(x, 2, 2)?;
            Ok(t.sum(y))
        },
        &p,
        &cfg,
    )
    .unwrap();
    assert!(!r.excluded.is_empty());
    assert!(r.excluded.iter().all(|c| c.param == "x"));
}

#[test]
fn nondeterministic_program_is_rejected() {
    let p = store(&[("x", Tensor::scalar(1.0))]);
    let counter = std::cell::Cell::new(0.0);
    let r = check_gradients(
        |t, s| {
            counter.set(counter.get() + 1.0);
            let x = s.bind(t, "x")?;
            let noise = t.constant(Tensor::scalar(counter.get()));
            t.add(x, noise)
        },
        &p,
        &GradCheckConfig::default(),
    );
    assert!(matches!(r, Err(Error::NonDeterministic)));
}

#[test]
fn forward_backward_is_bit_reproducible() {
    let run = || {
        let mut t = Tape::new();
        let x = t.variable(probe(Shape::new(2, 2, 6, 6), 30));
        let w = t.variable(probe(Shape::new(3, 2, 3, 3), 31));
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        let y = t.relu(y);
        let y = t.max_pool2d(y, 2, 2).unwrap();
        let y = t.upsample_bilinear(y, 6, 6).unwrap();
        let y = t.softmax(y, SoftmaxAxis::Spatial).unwrap();
        let l = t.weighted_sum(y, &probe(Shape::new(2, 3, 6, 6), 32)).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).clone(), g.wrt(x).unwrap().clone(), g.wrt(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}
