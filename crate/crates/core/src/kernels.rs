//! Forward and backward numeric kernels behind the tape operations.

use crate::tensor::{Shape, Tensor};

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `ox` in `[lo, hi)` whose input index `ox*stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest ox with ox*stride + k - pad <= len - 1
    let top = len + pad;
    let hi = if top > k { ((top - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let oh = conv_out_extent(xs.h, ws.h, stride, pad).expect("validated by caller");
    let ow = conv_out_extent(xs.w, ws.w, stride, pad).expect("validated by caller");
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = vec![0.0; os.numel()];
    let xd = x.data();
    let wd = w.data();
    let plane_in = xs.plane();
    let plane_out = oh * ow;
    for n in 0..xs.n {
        for co in 0..ws.n {
            let o = &mut out[(n * ws.n + co) * plane_out..][..plane_out];
            if let Some(b) = b {
                o.fill(b.data()[co]);
            }
            for ci in 0..ws.c {
                let xin = &xd[(n * xs.c + ci) * plane_in..][..plane_in];
                for ky in 0..ws.h {
                    let (oy_lo, oy_hi) = valid_range(oh, xs.h, ky, stride, pad);
                    for kx in 0..ws.w {
                        let wv = wd[ws.index(co, ci, ky, kx)];
                        let (ox_lo, ox_hi) = valid_range(ow, xs.w, kx, stride, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut o[oy * ow..(oy + 1) * ow];
                            let irow = &xin[iy * xs.w..(iy + 1) * xs.w];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                for (ov, iv) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[off..off + len]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out).expect("shape computed above")
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads {
    let xs = x.shape();
    let ws = w.shape();
    let os = dout.shape();
    let (oh, ow) = (os.h, os.w);
    let plane_in = xs.plane();
    let plane_out = oh * ow;
    let xd = x.data();
    let wd = w.data();
    let gd = dout.data();
    let mut dx = need.0.then(|| vec![0.0; xs.numel()]);
    let mut dw = need.1.then(|| vec![0.0; ws.numel()]);
    for n in 0..xs.n {
        for co in 0..ws.n {
            let g = &gd[(n * ws.n + co) * plane_out..][..plane_out];
            for ci in 0..ws.c {
                let in_off = (n * xs.c + ci) * plane_in;
                for ky in 0..ws.h {
                    let (oy_lo, oy_hi) = valid_range(oh, xs.h, ky, stride, pad);
                    for kx in 0..ws.w {
                        let widx = ws.index(co, ci, ky, kx);
                        let wv = wd[widx];
                        let (ox_lo, ox_hi) = valid_range(ow, xs.w, kx, stride, pad);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            let rstart = in_off + iy * xs.w;
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                if let Some(dx) = dx.as_mut() {
                                    let drow = &mut dx[rstart + off..rstart + off + len];
                                    for (d, gv) in drow.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                        *d += wv * gv;
                                    }
                                }
                                if dw.is_some() {
                                    let irow = &xd[rstart + off..rstart + off + len];
                                    acc += grow[ox_lo..ox_hi]
                                        .iter()
                                        .zip(irow)
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = rstart + ox * stride + kx - pad;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[ix] += wv * grow[ox];
                                    }
                                    acc += grow[ox] * xd[ix];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    let db = need.2.then(|| {
        let mut db = vec![0.0; ws.n];
        for n in 0..os.n {
            for (co, slot) in db.iter_mut().enumerate() {
                *slot += gd[(n * os.c + co) * plane_out..][..plane_out].iter().sum::<f64>();
            }
        }
        Tensor::new(Shape::new(1, ws.n, 1, 1), db).expect("bias shape")
    });
    ConvGrads {
        dx: dx.map(|d| Tensor::new(xs, d).expect("input shape")),
        dw: dw.map(|d| Tensor::new(ws, d).expect("kernel shape")),
        db,
    }
}

/// Per-window maximum; returns the output and, for each output element, the flat
/// input index it was taken from (first row-major index on ties).
pub(crate) fn maxpool_forward(x: &Tensor, k: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let xs = x.shape();
    let oh = (xs.h - k) / stride + 1;
    let ow = (xs.w - k) / stride + 1;
    let os = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    let xd = x.data();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * xs.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + (oy * stride) * xs.w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * stride + ky) * xs.w + ox * stride + kx;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(xd[best_i]);
                    arg.push(best_i);
                }
            }
        }
    }
    (Tensor::new(os, out).expect("pool shape"), arg)
}

/// Non-overlapping window mean with window `kh × kw`.
pub(crate) fn avgpool_forward(x: &Tensor, kh: usize, kw: usize) -> Tensor {
    let xs = x.shape();
    let (oh, ow) = (xs.h / kh, xs.w / kw);
    let inv = 1.0 / (kh * kw) as f64;
    Tensor::from_fn(Shape::new(xs.n, xs.c, oh, ow), |n, c, oy, ox| {
        let mut s = 0.0;
        for ky in 0..kh {
            for kx in 0..kw {
                s += x.at(n, c, oy * kh + ky, ox * kw + kx);
            }
        }
        s * inv
    })
}

pub(crate) fn avgpool_backward(dout: &Tensor, input: Shape, kh: usize, kw: usize) -> Tensor {
    let inv = 1.0 / (kh * kw) as f64;
    Tensor::from_fn(input, |n, c, y, x| dout.at(n, c, y / kh, x / kw) * inv)
}

/// Source taps for one axis of align-corners-false linear resampling: `(i0, i1, frac)`.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let xs = x.shape();
    let ty = linear_taps(xs.h, oh);
    let tx = linear_taps(xs.w, ow);
    Tensor::from_fn(Shape::new(xs.n, xs.c, oh, ow), |n, c, y, xo| {
        let (y0, y1, ly) = ty[y];
        let (x0, x1, lx) = tx[xo];
        let top = (1.0 - lx) * x.at(n, c, y0, x0) + lx * x.at(n, c, y0, x1);
        let bot = (1.0 - lx) * x.at(n, c, y1, x0) + lx * x.at(n, c, y1, x1);
        (1.0 - ly) * top + ly * bot
    })
}

pub(crate) fn upsample_backward(dout: &Tensor, input: Shape) -> Tensor {
    let os = dout.shape();
    let ty = linear_taps(input.h, os.h);
    let tx = linear_taps(input.w, os.w);
    let mut dx = Tensor::zeros(input);
    for n in 0..os.n {
        for c in 0..os.c {
            for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let g = dout.at(n, c, y, xo);
                    *dx.at_mut(n, c, y0, x0) += (1.0 - ly) * (1.0 - lx) * g;
                    *dx.at_mut(n, c, y0, x1) += (1.0 - ly) * lx * g;
                    *dx.at_mut(n, c, y1, x0) += ly * (1.0 - lx) * g;
                    *dx.at_mut(n, c, y1, x1) += ly * lx * g;
                }
            }
        }
    }
    dx
}

/// Visits every softmax group as a list of flat indices into the tensor.
pub(crate) fn for_each_group(shape: Shape, channel_axis: bool, mut f: impl FnMut(&[usize])) {
    let mut idx = Vec::new();
    if channel_axis {
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    idx.clear();
                    idx.extend((0..shape.c).map(|c| shape.index(n, c, y, x)));
                    f(&idx);
                }
            }
        }
    } else {
        let p = shape.plane();
        for g in 0..shape.n * shape.c {
            idx.clear();
            idx.extend(g * p..(g + 1) * p);
            f(&idx);
        }
    }
}

pub(crate) fn softmax_forward(x: &Tensor, channel_axis: bool) -> Tensor {
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for_each_group(x.shape(), channel_axis, |idx| {
        let m = idx.iter().fold(f64::NEG_INFINITY, |m, &i| m.max(xd[i]));
        let mut s = 0.0;
        for &i in idx {
            let e = (xd[i] - m).exp();
            out[i] = e;
            s += e;
        }
        for &i in idx {
            out[i] /= s;
        }
    });
    Tensor::new(x.shape(), out).expect("same shape")
}

pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor, channel_axis: bool) -> Tensor {
    let yd = y.data();
    let gd = dy.data();
    let mut dx = vec![0.0; yd.len()];
    for_each_group(y.shape(), channel_axis, |idx| {
        let dot: f64 = idx.iter().map(|&i| yd[i] * gd[i]).sum();
        for &i in idx {
            dx[i] = yd[i] * (gd[i] - dot);
        }
    });
    Tensor::new(y.shape(), dx).expect("same shape")
}

/// Spatial min-shift normalization `(q - min) / Σ (q_j - min)` per `(n, c)` plane.
/// A constant plane maps to the uniform value `1 / (H·W)`. Returns the output,
/// the argmin flat index per plane, and the plane's denominator (0 when constant).
pub(crate) fn min_shift_forward(x: &Tensor) -> (Tensor, Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let p = s.plane();
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut argmin = Vec::with_capacity(s.n * s.c);
    let mut sums = Vec::with_capacity(s.n * s.c);
    let uniform = 1.0 / p as f64;
    for g in 0..s.n * s.c {
        let plane = &xd[g * p..(g + 1) * p];
        let mut mi = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v < plane[mi] {
                mi = i;
            }
        }
        let m = plane[mi];
        let total: f64 = plane.iter().map(|v| v - m).sum();
        let o = &mut out[g * p..(g + 1) * p];
        if total > 0.0 {
            for (ov, v) in o.iter_mut().zip(plane) {
                *ov = (v - m) / total;
            }
        } else {
            o.fill(uniform);
        }
        argmin.push(g * p + mi);
        sums.push(if total > 0.0 { total } else { 0.0 });
    }
    (Tensor::new(s, out).expect("same shape"), argmin, sums)
}

pub(crate) fn min_shift_backward(y: &Tensor, dy: &Tensor, argmin: &[usize], sums: &[f64]) -> Tensor {
    let s = y.shape();
    let p = s.plane();
    let yd = y.data();
    let gd = dy.data();
    let mut dx = vec![0.0; yd.len()];
    for g in 0..s.n * s.c {
        let total = sums[g];
        if total == 0.0 {
            continue;
        }
        let range = g * p..(g + 1) * p;
        let gsum: f64 = gd[range.clone()].iter().sum();
        let gdot: f64 = range.clone().map(|i| gd[i] * yd[i]).sum();
        for i in range {
            dx[i] = (gd[i] - gdot) / total;
        }
        // the argmin entry enters every numerator and the denominator
        dx[argmin[g]] += (-gsum + p as f64 * gdot) / total;
    }
    Tensor::new(s, dx).expect("same shape")
}
