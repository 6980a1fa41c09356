//! Define-by-run reverse-mode autodiff.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! execution order, so parents always precede children and a single reverse
//! sweep visits each node exactly once.

use indexmap::IndexMap;

use crate::error::{invalid, Error, Result};
use crate::kernels;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    Channel,
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    GlobalAvgPool,
    SpatialSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kh: usize,
        kw: usize,
    },
    Upsample(Var),
    Softmax {
        x: Var,
        axis: SoftmaxAxis,
    },
    MinShift {
        x: Var,
        argmin: Vec<usize>,
        sums: Vec<f64>,
    },
    Reduce {
        x: Var,
        op: Reduction,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Max(Var, Var),
    Sum(Var),
    WeightedSum(Var, Tensor),
    Dice {
        probs: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    consumed: bool,
    track_branches: bool,
    signature: u64,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: IndexMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter. Parameters the loss does not reach get `None`.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// All bound parameters in binding order, with zero gradients filled in for
    /// parameters the loss did not reach.
    pub fn params<'a>(&'a self, tape: &'a Tape) -> impl Iterator<Item = (&'a str, Tensor)> + 'a {
        self.params.iter().map(move |(name, &v)| {
            let g = self
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            (name.as_str(), g)
        })
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records non-smooth branch decisions (relu masks, pooling argmax, min-shift
    /// argmin) into [`Tape::branch_signature`]. Off by default; the gradient
    /// checker uses it to detect perturbations that cross a kink.
    pub fn with_branch_tracking() -> Self {
        Tape {
            track_branches: true,
            signature: 0xcbf2_9ce4_8422_2325,
            ..Tape::default()
        }
    }

    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    fn mix(&mut self, v: u64) {
        if self.track_branches {
            self.signature = (self.signature ^ v).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named trainable parameter. Binding the same name twice returns the
    /// existing node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Copies a node's value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Sigmoid, None) => Ok(self.sigmoid(a)),
            (op, _) => Err(invalid("elementwise", format!("wrong operand count for {op:?}"))),
        }
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if sb.c == 1 && sa.n == sb.n && sa.h == sb.h && sa.w == sb.w {
            return Ok(true);
        }
        Err(Error::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        })
    }

    /// Elementwise `a + b`; `b` may have a single channel broadcast across `a`'s channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.check_broadcast("add", a, b)?;
        let out = binary_broadcast(self.value(a), self.value(b), bc, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise `a * b`; `b` may have a single channel broadcast across `a`'s channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.check_broadcast("mul", a, b)?;
        let out = binary_broadcast(self.value(a), self.value(b), bc, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise maximum of equal-shaped tensors; ties take `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "maximum",
                left: sa,
                right: sb,
            });
        }
        let out = binary_broadcast(self.value(a), self.value(b), false, f64::max);
        if self.track_branches {
            let picks: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| u64::from(y > x))
                .collect();
            for p in picks {
                self.mix(p);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Max(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        if self.track_branches {
            let mask: Vec<u64> = self.value(a).data().iter().map(|&v| u64::from(v > 0.0)).collect();
            for m in mask {
                self.mix(m);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// Cross-correlation. `w` is `(C_out, C_in, kH, kW)`, `b` is `(1, C_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.c != xs.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if kernels::conv_out_extent(xs.h, ws.h, stride, pad).is_none()
            || kernels::conv_out_extent(xs.w, ws.w, stride, pad).is_none()
        {
            return Err(invalid(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", ws.h, ws.w, xs.h + 2 * pad, xs.w + 2 * pad),
            ));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: ws,
                    right: bs,
                });
            }
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(invalid("max_pool2d", "window and stride must be positive"));
        }
        let xs = self.shape(x);
        if xs.h < k || xs.w < k {
            return Err(invalid("max_pool2d", format!("window {k} larger than input {xs}")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x), k, stride);
        if self.track_branches {
            for &a in &argmax {
                self.mix(a as u64);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Non-overlapping window average to an integer-ratio coarser grid.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xs = self.shape(x);
        if kh == 0 || kw == 0 || xs.h % kh != 0 || xs.w % kw != 0 {
            return Err(invalid(
                "avg_pool2d",
                format!("window {kh}x{kw} does not tile input {}x{}", xs.h, xs.w),
            ));
        }
        let out = kernels::avgpool_forward(self.value(x), kh, kw);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool { x, kh, kw }, rg))
    }

    /// Bilinear resampling, align-corners-false with edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x);
        if out_h == 0 || out_w == 0 {
            return Err(invalid("upsample_bilinear", "output extent must be positive"));
        }
        if out_h < xs.h || out_w < xs.w {
            return Err(invalid(
                "upsample_bilinear",
                format!("target {out_h}x{out_w} smaller than input {}x{}", xs.h, xs.w),
            ));
        }
        let out = kernels::upsample_forward(self.value(x), out_h, out_w);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: SoftmaxAxis) -> Result<Var> {
        let xs = self.shape(x);
        let len = match axis {
            SoftmaxAxis::Channel => xs.c,
            SoftmaxAxis::Spatial => xs.plane(),
        };
        if len == 0 {
            return Err(invalid("softmax", "empty axis"));
        }
        let out = kernels::softmax_forward(self.value(x), axis == SoftmaxAxis::Channel);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Spatial min-shift normalization per `(n, c)` plane.
    pub fn min_shift(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).plane() == 0 {
            return Err(invalid("min_shift", "empty spatial extent"));
        }
        let (out, argmin, sums) = kernels::min_shift_forward(self.value(x));
        if self.track_branches {
            for &a in &argmin {
                self.mix(a as u64);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MinShift { x, argmin, sums }, rg))
    }

    pub fn reduce(&mut self, op: Reduction, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.plane() == 0 {
            return Err(invalid("reduce", "empty spatial extent"));
        }
        let inv = 1.0 / xs.plane() as f64;
        let t = self.value(x);
        let out = Tensor::from_fn(Shape::new(xs.n, xs.c, 1, 1), |n, c, _, _| {
            let plane = t.plane(n, c);
            match op {
                Reduction::SpatialSum => plane.iter().sum(),
                Reduction::GlobalAvgPool => plane.iter().map(|v| v * inv).sum(),
            }
        });
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reduce { x, op }, rg))
    }

    pub fn channel_concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p),
            None => return Err(invalid("channel_concat", "no parts")),
        };
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "channel_concat",
                    left: first,
                    right: s,
                });
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape().c * t.shape().plane();
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if len == 0 || start + len > xs.c {
            return Err(invalid(
                "slice_channels",
                format!("channels {start}..{} out of range for {xs}", start + len),
            ));
        }
        let t = self.value(x);
        let out = Tensor::from_fn(Shape::new(xs.n, len, xs.h, xs.w), |n, c, y, xx| t.at(n, start + c, y, xx));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    /// `(N, C, H, W)` to `(N, C·H·W, 1, 1)`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = self
            .value(x)
            .clone()
            .reshape(Shape::new(s.n, s.c * s.plane(), 1, 1))
            .expect("same element count");
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Affine map on flat features. `x` is `(N, F_in, 1, 1)`, `w` is
    /// `(F_in, F_out, 1, 1)` (one row per input feature), `b` holds `F_out` values.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let f_in = xs.c * xs.plane();
        if ws.n != f_in || ws.h * ws.w != 1 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        if bs.numel() != ws.c {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: ws,
                right: bs,
            });
        }
        let (xt, wt, bt) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let f_out = ws.c;
        let mut out = Vec::with_capacity(xs.n * f_out);
        for n in 0..xs.n {
            let row = &xt[n * f_in..(n + 1) * f_in];
            for j in 0..f_out {
                let mut acc = bt[j];
                for (i, xv) in row.iter().enumerate() {
                    acc += xv * wt[i * f_out + j];
                }
                out.push(acc);
            }
        }
        let out = Tensor::new(Shape::new(xs.n, f_out, 1, 1), out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Per-channel batch normalization. In train mode the batch statistics are used
    /// and `stats` is updated with momentum [`BN_MOMENTUM`]; eval mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        let xs = self.shape(x);
        if self.shape(gamma).numel() != xs.c || self.shape(beta).numel() != xs.c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: xs,
                right: self.shape(gamma),
            });
        }
        if stats.mean.len() != xs.c || stats.var.len() != xs.c {
            return Err(invalid("batch_norm", "running stats channel count mismatch"));
        }
        if mode == BnMode::Train && xs.n < 2 {
            return Err(invalid("batch_norm", "train mode needs a batch of at least 2"));
        }
        let p = xs.plane();
        let m = (xs.n * p) as f64;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(xs.c);
        for c in 0..xs.c {
            let planes = || (0..xs.n).map(move |n| (n * xs.c + c) * p);
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mean = planes().map(|o| xd[o..o + p].iter().sum::<f64>()).sum::<f64>() / m;
                    let var = planes()
                        .map(|o| xd[o..o + p].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                        .sum::<f64>()
                        / m;
                    stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean;
                    let unbiased = var * m / (m - 1.0);
                    stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (stats.mean[c], stats.var[c]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std.push(is);
            for o in planes() {
                for i in o..o + p {
                    let h = (xd[i] - mean) * is;
                    xhat[i] = h;
                    out[i] = gd[c] * h + bd[c];
                }
            }
        }
        let out = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Scalar `Σ x ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                left: self.shape(x),
                right: weights.shape(),
            });
        }
        let s: f64 = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.clone()), rg))
    }

    /// Soft multi-class Dice loss
    /// `1 − (1/C) Σ_c (2 Σ p·t + ε) / (Σ p + Σ t + ε)` with `ε` = [`DICE_EPS`],
    /// sums running over batch and space.
    pub fn dice_loss(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let ps = self.shape(probs);
        if ps != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "dice_loss",
                left: ps,
                right: target.shape(),
            });
        }
        check_one_hot(target)?;
        let (inter, psum, tsum) = dice_sums(self.value(probs), target);
        let c = ps.c as f64;
        let score: f64 = (0..ps.c)
            .map(|k| (2.0 * inter[k] + DICE_EPS) / (psum[k] + tsum[k] + DICE_EPS))
            .sum();
        let out = Tensor::scalar(1.0 - score / c);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            out,
            Op::Dice {
                probs,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `(N, C, 1, 1)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.plane() != 1 || ls.n != labels.len() {
            return Err(invalid(
                "cross_entropy",
                format!("logits {ls} vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= ls.c) {
            return Err(invalid("cross_entropy", format!("label {bad} out of range for {} classes", ls.c)));
        }
        let probs = kernels::softmax_forward(self.value(logits), true);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(n, &l)| {
                let lg = self.value(logits);
                let row: Vec<f64> = (0..ls.c).map(|c| lg.at(n, c, 0, 0)).collect();
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / ls.n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. A tape can be swept once; re-run the
    /// forward pass on a new tape for another gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::AlreadyBackpropagated);
        }
        if self.nodes.is_empty() {
            return Err(invalid("backward", "empty tape"));
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NotScalar(ls));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(ls));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                if needs(*b) {
                    let bs = self.shape(*b);
                    acc(*b, reduce_broadcast(g, bs), grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bc = av.shape() != bv.shape();
                if needs(*a) {
                    acc(*a, binary_broadcast(g, bv, bc, |x, y| x * y), grads);
                }
                if needs(*b) {
                    let prod = binary_broadcast(g, av, false, |x, y| x * y);
                    acc(*b, reduce_broadcast(&prod, bv.shape()), grads);
                }
            }
            Op::Max(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = g.clone();
                let mut gb = g.clone();
                for i in 0..av.len() {
                    if bv[i] > av[i] {
                        ga.data_mut()[i] = 0.0;
                    } else {
                        gb.data_mut()[i] = 0.0;
                    }
                }
                acc(*a, ga, grads);
                acc(*b, gb, grads);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(av) {
                    if x <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(*a, d, grads);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let mut d = g.clone();
                for (dv, &s) in d.data_mut().iter_mut().zip(y) {
                    *dv *= s * (1.0 - s);
                }
                acc(*a, d, grads);
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k), grads),
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = (needs(*x), needs(*w), b.is_some_and(needs));
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, need);
                if let Some(dx) = cg.dx {
                    acc(*x, dx, grads);
                }
                if let Some(dw) = cg.dw {
                    acc(*w, dw, grads);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    let bs = self.shape(*b);
                    acc(*b, db.reshape(bs).expect("bias numel checked"), grads);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (gv, &i) in g.data().iter().zip(argmax) {
                    dx.data_mut()[i] += gv;
                }
                acc(*x, dx, grads);
            }
            Op::AvgPool { x, kh, kw } => {
                acc(*x, kernels::avgpool_backward(g, self.shape(*x), *kh, *kw), grads);
            }
            Op::Upsample(x) => acc(*x, kernels::upsample_backward(g, self.shape(*x)), grads),
            Op::Softmax { x, axis } => {
                let d = kernels::softmax_backward(&node.value, g, *axis == SoftmaxAxis::Channel);
                acc(*x, d, grads);
            }
            Op::MinShift { x, argmin, sums } => {
                acc(*x, kernels::min_shift_backward(&node.value, g, argmin, sums), grads);
            }
            Op::Reduce { x, op } => {
                let xs = self.shape(*x);
                let k = match op {
                    Reduction::SpatialSum => 1.0,
                    Reduction::GlobalAvgPool => 1.0 / xs.plane() as f64,
                };
                acc(*x, Tensor::from_fn(xs, |n, c, _, _| g.at(n, c, 0, 0) * k), grads);
            }
            Op::Concat(parts) => {
                let gs = g.shape();
                let mut c0 = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    if needs(p) {
                        let off = c0;
                        acc(p, Tensor::from_fn(ps, |n, c, y, x| g.at(n, off + c, y, x)), grads);
                    }
                    c0 += ps.c;
                }
                debug_assert_eq!(c0, gs.c);
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let gs = g.shape();
                let mut dx = Tensor::zeros(xs);
                for n in 0..gs.n {
                    for c in 0..gs.c {
                        for y in 0..gs.h {
                            for xx in 0..gs.w {
                                *dx.at_mut(n, start + c, y, xx) = g.at(n, c, y, xx);
                            }
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x)).expect("same numel"), grads),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (f_in, f_out) = (ws.n, ws.c);
                let (xt, wt, gt) = (self.value(*x).data(), self.value(*w).data(), g.data());
                if needs(*x) {
                    let mut dx = vec![0.0; xs.numel()];
                    for n in 0..xs.n {
                        for i in 0..f_in {
                            dx[n * f_in + i] = (0..f_out).map(|j| gt[n * f_out + j] * wt[i * f_out + j]).sum();
                        }
                    }
                    acc(*x, Tensor::new(xs, dx).expect("input shape"), grads);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; ws.numel()];
                    for n in 0..xs.n {
                        for i in 0..f_in {
                            let xv = xt[n * f_in + i];
                            for j in 0..f_out {
                                dw[i * f_out + j] += xv * gt[n * f_out + j];
                            }
                        }
                    }
                    acc(*w, Tensor::new(ws, dw).expect("weight shape"), grads);
                }
                if needs(*b) {
                    let mut db = vec![0.0; f_out];
                    for n in 0..xs.n {
                        for j in 0..f_out {
                            db[j] += gt[n * f_out + j];
                        }
                    }
                    let bs = self.shape(*b);
                    acc(*b, Tensor::new(bs, db).expect("bias shape"), grads);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let p = xs.plane();
                let m = (xs.n * p) as f64;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; xs.c];
                let mut dbeta = vec![0.0; xs.c];
                let mut dx = vec![0.0; xs.numel()];
                for c in 0..xs.c {
                    let idx = || (0..xs.n).flat_map(move |n| (n * xs.c + c) * p..(n * xs.c + c + 1) * p);
                    let sg: f64 = idx().map(|i| gd[i]).sum();
                    let sgx: f64 = idx().map(|i| gd[i] * xhat[i]).sum();
                    dgamma[c] = sgx;
                    dbeta[c] = sg;
                    let k = gam[c] * inv_std[c];
                    match mode {
                        BnMode::Train => {
                            for i in idx() {
                                dx[i] = k * (gd[i] - sg / m - xhat[i] * sgx / m);
                            }
                        }
                        BnMode::Eval => {
                            for i in idx() {
                                dx[i] = k * gd[i];
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xs, dx).expect("input shape"), grads);
                let gs = self.shape(*gamma);
                acc(*gamma, Tensor::new(gs, dgamma).expect("gamma shape"), grads);
                let bs = self.shape(*beta);
                acc(*beta, Tensor::new(bs, dbeta).expect("beta shape"), grads);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x), s), grads);
            }
            Op::WeightedSum(x, wts) => {
                let s = g.data()[0];
                acc(*x, wts.map(|v| v * s), grads);
            }
            Op::Dice { probs, target } => {
                let s = g.data()[0];
                let pv = self.value(*probs);
                let ps = pv.shape();
                let (inter, psum, tsum) = dice_sums(pv, target);
                let c = ps.c as f64;
                let d = Tensor::from_fn(ps, |n, k, y, x| {
                    let den = psum[k] + tsum[k] + DICE_EPS;
                    let num = 2.0 * inter[k] + DICE_EPS;
                    -s / c * (2.0 * target.at(n, k, y, x) / den - num / (den * den))
                });
                acc(*probs, d, grads);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = g.data()[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (n, &l) in labels.iter().enumerate() {
                    *d.at_mut(n, l, 0, 0) -= 1.0;
                }
                for v in d.data_mut() {
                    *v *= s;
                }
                acc(*logits, d, grads);
            }
        }
    }
}

pub const DICE_EPS: f64 = 1e-6;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn binary_broadcast(a: &Tensor, b: &Tensor, broadcast: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if !broadcast {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data).expect("same shape");
    }
    let s = a.shape();
    let p = s.plane();
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        let bp = &b.data()[n * p..(n + 1) * p];
        for c in 0..s.c {
            let ap = &a.data()[(n * s.c + c) * p..][..p];
            data.extend(ap.iter().zip(bp).map(|(&x, &y)| f(x, y)));
        }
    }
    Tensor::new(s, data).expect("same shape")
}

/// Sums a full-shape gradient down to a single-channel broadcast operand.
fn reduce_broadcast(g: &Tensor, target: Shape) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let s = g.shape();
    let p = s.plane();
    let mut out = vec![0.0; target.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let gp = &g.data()[(n * s.c + c) * p..][..p];
            for (o, v) in out[n * p..(n + 1) * p].iter_mut().zip(gp) {
                *o += v;
            }
        }
    }
    Tensor::new(target, out).expect("broadcast target")
}

fn dice_sums(p: &Tensor, t: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = p.shape();
    let mut inter = vec![0.0; s.c];
    let mut psum = vec![0.0; s.c];
    let mut tsum = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for (pv, tv) in p.plane(n, c).iter().zip(t.plane(n, c)) {
                inter[c] += pv * tv;
                psum[c] += pv;
                tsum[c] += tv;
            }
        }
    }
    (inter, psum, tsum)
}

fn check_one_hot(t: &Tensor) -> Result<()> {
    let s = t.shape();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut ones = 0;
                for c in 0..s.c {
                    match t.at(n, c, y, x) {
                        v if v == 1.0 => ones += 1,
                        v if v == 0.0 => {}
                        v => return Err(invalid("dice_loss", format!("target value {v} is not 0 or 1"))),
                    }
                }
                if ones != 1 {
                    return Err(invalid("dice_loss", format!("target pixel ({n}, {y}, {x}) is not one-hot")));
                }
            }
        }
    }
    Ok(())
}
