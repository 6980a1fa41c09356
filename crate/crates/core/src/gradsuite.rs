//! Ready-made gradient-check targets: every primitive op, the attention gate
//! in all of its modes, and small full networks.

use crate::classifier::{Classifier, ClassifierConfig, Pooling};
use crate::error::Result;
use crate::gate::{gated_skip, AttentionGateParams, GateConfig, GateVars, GridMode, Normalization, SubGateSharing};
use crate::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::nn::Ctx;
use crate::params::{rng_for, ParamStore};
use crate::tape::{BnMode, Reduction, RunningStats, SoftmaxAxis, Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::unet::{seg_loss, GateOverride, UNet, UNetConfig};

use rand_distr::{Distribution, StandardNormal};

/// Threshold for primitive ops and the gate.
pub const OP_THRESHOLD: f64 = 1e-6;
/// Threshold for whole networks.
pub const NET_THRESHOLD: f64 = 1e-5;

type Program = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub params: ParamStore,
    pub program: Program,
    pub threshold: f64,
}

pub struct CaseResult {
    pub name: String,
    pub threshold: f64,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        !self.report.checked.is_empty() && self.report.max_rel_error() < self.threshold
    }
}

pub fn run(cases: Vec<GradCase>, cfg: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    cases
        .into_iter()
        .map(|c| {
            let report = check_gradients(c.program, &c.params, cfg)?;
            Ok(CaseResult {
                name: c.name,
                threshold: c.threshold,
                report,
            })
        })
        .collect()
}

/// Standard-normal tensor keyed by `tag`.
pub fn probe(shape: Shape, tag: &str) -> Tensor {
    let mut rng = rng_for(0x6a09_e667, tag);
    Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(&mut rng))
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.trainable(*n, t.clone());
    }
    s
}

fn case(name: &str, params: ParamStore, threshold: f64, program: impl Fn(&mut Tape, &ParamStore) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name: name.to_string(),
        params,
        program: Box::new(program),
        threshold,
    }
}

/// Projects `y` onto a fixed random direction, giving a scalar.
fn project(t: &mut Tape, y: Var, tag: &str) -> Result<Var> {
    let r = probe(t.shape(y), tag);
    t.weighted_sum(y, &r)
}

pub fn op_cases() -> Vec<GradCase> {
    let sh = Shape::new(2, 3, 5, 4);
    let thr = OP_THRESHOLD;
    vec![
        case("add/mul broadcast", store(&[("a", probe(sh, "a")), ("b", probe(Shape::new(2, 1, 5, 4), "b"))]), thr, |t, s| {
            let (a, b) = (s.bind(t, "a")?, s.bind(t, "b")?);
            let m = t.mul(a, b)?;
            let y = t.add(m, b)?;
            project(t, y, "r")
        }),
        case("relu/sigmoid/scale", store(&[("a", probe(sh, "relu"))]), thr, |t, s| {
            let a = s.bind(t, "a")?;
            let y = t.relu(a);
            let z = t.sigmoid(a);
            let z = t.scale(z, -1.7);
            let y = t.add(y, z)?;
            project(t, y, "r")
        }),
        case(
            "conv2d",
            store(&[
                ("x", probe(Shape::new(2, 2, 6, 5), "cx")),
                ("w", probe(Shape::new(3, 2, 3, 3), "cw")),
                ("b", probe(Shape::new(1, 3, 1, 1), "cb")),
            ]),
            thr,
            |t, s| {
                let (x, w, b) = (s.bind(t, "x")?, s.bind(t, "w")?, s.bind(t, "b")?);
                let y1 = t.conv2d(x, w, Some(b), 1, 1)?;
                let y2 = t.conv2d(x, w, None, 2, 0)?;
                let a = project(t, y2, "c2")?;
                let l = project(t, y1, "c1")?;
                t.add(l, a)
            },
        ),
        case("maxpool", store(&[("x", probe(Shape::new(2, 2, 6, 6), "mp"))]), thr, |t, s| {
            let x = s.bind(t, "x")?;
            let y = t.max_pool2d(x, 2, 2)?;
            project(t, y, "mpr")
        }),
        case("avgpool/upsample", store(&[("x", probe(Shape::new(1, 2, 4, 6), "up"))]), thr, |t, s| {
            let x = s.bind(t, "x")?;
            let d = t.avg_pool2d(x, 2, 3)?;
            let u = t.upsample_bilinear(d, 5, 7)?;
            project(t, u, "upr")
        }),
        case("softmax", store(&[("x", probe(sh, "sm"))]), thr, |t, s| {
            let x = s.bind(t, "x")?;
            let a = t.softmax(x, SoftmaxAxis::Channel)?;
            let b = t.softmax(x, SoftmaxAxis::Spatial)?;
            let y = t.add(a, b)?;
            project(t, y, "r")
        }),
        case("min-shift", store(&[("x", probe(sh, "ms"))]), thr, |t, s| {
            let x = s.bind(t, "x")?;
            let y = t.min_shift(x)?;
            project(t, y, "r")
        }),
        case(
            "reduce/concat/slice/linear",
            store(&[
                ("x", probe(sh, "rx")),
                ("w", probe(Shape::new(6, 2, 1, 1), "rw")),
                ("b", probe(Shape::new(1, 2, 1, 1), "rb")),
            ]),
            thr,
            |t, s| {
                let (x, w, b) = (s.bind(t, "x")?, s.bind(t, "w")?, s.bind(t, "b")?);
                let avg = t.reduce(Reduction::GlobalAvgPool, x)?;
                let sum = t.reduce(Reduction::SpatialSum, x)?;
                let cat = t.channel_concat(&[avg, sum])?;
                let flat = t.flatten(cat);
                let y = t.linear(flat, w, b)?;
                let part = t.slice_channels(x, 1, 2)?;
                let a = project(t, part, "sl")?;
                let l = project(t, y, "ln")?;
                t.add(l, a)
            },
        ),
        case(
            "batch norm",
            store(&[
                ("x", probe(sh, "bx")),
                ("g", probe(Shape::new(1, 3, 1, 1), "bg")),
                ("b", probe(Shape::new(1, 3, 1, 1), "bb")),
            ]),
            thr,
            |t, s| {
                let (x, g, b) = (s.bind(t, "x")?, s.bind(t, "g")?, s.bind(t, "b")?);
                let mut st = RunningStats::new(3);
                let y = t.batch_norm(x, g, b, BnMode::Train, &mut st)?;
                let mut fixed = RunningStats {
                    mean: vec![0.1, -0.3, 0.2],
                    var: vec![0.5, 2.0, 1.1],
                };
                let z = t.batch_norm(x, g, b, BnMode::Eval, &mut fixed)?;
                let y = t.add(y, z)?;
                project(t, y, "r")
            },
        ),
        case("maximum", store(&[("a", probe(sh, "ma")), ("b", probe(sh, "mb"))]), thr, |t, s| {
            let (a, b) = (s.bind(t, "a")?, s.bind(t, "b")?);
            let y = t.maximum(a, b)?;
            project(t, y, "r")
        }),
        case("dice loss", store(&[("x", probe(sh, "dl"))]), thr, move |t, s| {
            let x = s.bind(t, "x")?;
            let p = t.softmax(x, SoftmaxAxis::Channel)?;
            let target = Tensor::from_fn(sh, |n, c, y, xx| f64::from((n + y * 3 + xx) % 3 == c));
            t.dice_loss(p, &target)
        }),
        case("cross entropy", store(&[("x", probe(Shape::new(4, 3, 1, 1), "ce"))]), thr, |t, s| {
            let x = s.bind(t, "x")?;
            t.cross_entropy(x, &[0, 2, 1, 2])
        }),
    ]
}

/// The gate in every normalization, grid and sub-gate configuration, with
/// `x`, `g` and all gate parameters free.
pub fn gate_cases() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let modes = [Normalization::Sigmoid, Normalization::Softmax, Normalization::MinShift];
    let variants = [
        (GridMode::UpToX, 1, SubGateSharing::Shared),
        (GridMode::DownToG, 1, SubGateSharing::Shared),
        (GridMode::UpToX, 2, SubGateSharing::Shared),
        (GridMode::UpToX, 2, SubGateSharing::Separate),
    ];
    for (mi, &norm) in modes.iter().enumerate() {
        for (vi, &(grid, m, sharing)) in variants.iter().enumerate() {
            let cfg = GateConfig {
                f_l: 3,
                f_g: 4,
                f_int: 2,
                sub_gates: m,
                normalization: norm,
                grid,
                sharing,
            };
            let mut p = ParamStore::new();
            AttentionGateParams::random(cfg, (mi * 10 + vi) as u64)?.register(&mut p, "gate");
            p.trainable("x", probe(Shape::new(2, 3, 6, 6), "gx"));
            p.trainable("g", probe(Shape::new(2, 4, 3, 3), "gg"));
            let name = format!("gate {norm:?} {grid:?} m={m} {sharing:?}");
            out.push(case(&name, p, OP_THRESHOLD, move |t, s| {
                let (x, g) = (s.bind(t, "x")?, s.bind(t, "g")?);
                let gv = GateVars::bind(s, t, "gate", cfg)?;
                let (y, map) = gated_skip(t, x, g, &gv, 1)?;
                let l = project(t, y, "gy")?;
                let a = project(t, map.alpha, "ga")?;
                t.add(l, a)
            }));
        }
    }
    Ok(out)
}

fn randomize_gates(p: &mut ParamStore, gates: &[(String, GateConfig)]) -> Result<()> {
    for (i, (prefix, gc)) in gates.iter().enumerate() {
        AttentionGateParams::random(*gc, 100 + i as u64)?.register(p, prefix);
    }
    Ok(())
}

/// Depth-3 gated U-Net on a 16×16 batch of two, full training loss.
pub fn unet_case() -> Result<GradCase> {
    let cfg = UNetConfig {
        depth: 3,
        base_filters: 2,
        height: 16,
        width: 16,
        ..UNetConfig::default()
    };
    let mut net = UNet::build(cfg.clone(), 7)?;
    let gates: Vec<_> = (0..cfg.depth - 1).map(|s| (crate::unet::gate_prefix(s), cfg.gate_config(s))).collect();
    randomize_gates(&mut net.params, &gates)?;
    let images = probe(Shape::new(2, 1, 16, 16), "ux");
    let masks: Vec<Vec<usize>> = (0..2).map(|n| (0..256).map(|i| (i / 16 + i % 16 + n) % 3).collect()).collect();
    let params = net.params.clone();
    Ok(case("attention u-net 16x16", params, NET_THRESHOLD, move |t, s| {
        let mut ctx = Ctx::new(s, BnMode::Train);
        let x = t.constant(images.clone());
        let out = net.forward(t, &mut ctx, x, GateOverride::Learned)?;
        let refs: Vec<&[usize]> = masks.iter().map(|m| m.as_slice()).collect();
        seg_loss(t, &cfg, &out, &refs)
    }))
}

/// Gated classifier on a 16×16 batch of four, cross-entropy loss.
pub fn classifier_case() -> Result<GradCase> {
    let cfg = ClassifierConfig {
        widths: vec![2, 3, 4, 4],
        height: 16,
        width: 16,
        ..ClassifierConfig::default()
    };
    let mut net = Classifier::build(cfg.clone(), 7)?;
    let gates: Vec<_> = cfg.gated_stages.iter().map(|&s| (crate::classifier::gate_prefix(s), cfg.gate_config(s))).collect();
    randomize_gates(&mut net.params, &gates)?;
    let images = probe(Shape::new(4, 1, 16, 16), "cx");
    let params = net.params.clone();
    Ok(case("attention classifier 16x16", params, NET_THRESHOLD, move |t, s| {
        let mut ctx = Ctx::new(s, BnMode::Train);
        let x = t.constant(images.clone());
        let out = net.forward(t, &mut ctx, x, Pooling::Learned)?;
        t.cross_entropy(out.logits, &[0, 1, 4, 2])
    }))
}
