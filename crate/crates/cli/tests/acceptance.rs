//! End-to-end acceptance suite: one PASS/FAIL line per criterion, then a
//! single assertion that every criterion passed.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use agkit::classifier::{Aggregation, Classifier, ClassifierConfig, Pooling};
use agkit::gate::{apply_gate, gated_skip, AttentionGateParams, GateConfig, GridMode, Normalization, SubGateSharing};
use agkit::gradcheck::GradCheckConfig;
use agkit::gradsuite::{self, NET_THRESHOLD, OP_THRESHOLD};
use agkit::nn::Ctx;
use agkit::params::rng_for;
use agkit::synth::{gen_cls, gen_seg, Split};
use agkit::tape::{BnMode, Reduction};
use agkit::unet::{GateOverride, UNet, UNetConfig};
use agkit::wsl::{connected_components, localize, BoundingBox, LocalizeConfig};
use agkit::{Shape, Tape, Tensor};
use agkit_cli::commands::{self, Net, Scope};
use agkit_cli::config::{Model, RunConfig, Task};
use rand::Rng;
use tempfile::TempDir;

const TWENTY_MINUTES: f64 = 20.0 * 60.0;

struct Verdicts(Vec<(usize, bool)>);

impl Verdicts {
    fn record(&mut self, n: usize, title: &str, pass: bool, detail: String) {
        println!("{} criterion {n:>2} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push((n, pass));
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64, tag: &str) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng_for(seed, tag))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- 1 ---------------------------------------------------------------------

fn gradient_fidelity(v: &mut Verdicts) {
    let cfg = GradCheckConfig::default();
    assert_eq!(cfg.eps, 1e-5);
    let t = Instant::now();
    let results = gradsuite::run(commands::gradcheck_cases(Scope::All).unwrap(), &cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = |thr: f64| {
        results
            .iter()
            .filter(|r| r.threshold == thr)
            .map(|r| r.report.max_rel_error())
            .fold(0.0, f64::max)
    };
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let nets = results.iter().filter(|r| r.threshold == NET_THRESHOLD).count();
    v.record(
        1,
        "gradient fidelity",
        failed.is_empty() && nets == 2 && secs < 120.0,
        format!(
            "{} targets, ops/gate max {:.2e} (< 1e-6), networks max {:.2e} (< 1e-5), {secs:.1}s, failing {failed:?}",
            results.len(),
            worst(OP_THRESHOLD),
            worst(NET_THRESHOLD)
        ),
    );
}

// ---- 2 ---------------------------------------------------------------------

fn gate_cfg(norm: Normalization, grid: GridMode, m: usize) -> GateConfig {
    GateConfig {
        f_l: 3,
        f_g: 4,
        f_int: 2,
        sub_gates: m,
        normalization: norm,
        grid,
        sharing: SubGateSharing::Shared,
    }
}

const NORMS: [Normalization; 3] = [Normalization::Sigmoid, Normalization::Softmax, Normalization::MinShift];

fn scaling_law(v: &mut Verdicts) {
    let mut worst = 0.0f64;
    let cases = 200u64;
    for i in 0..cases {
        let grid = if i % 2 == 0 { GridMode::UpToX } else { GridMode::DownToG };
        let gp = AttentionGateParams::random(gate_cfg(NORMS[(i % 3) as usize], grid, 1), i).unwrap();
        let x0 = uniform(Shape::new(2, 3, 8, 8), -2.0, 2.0, i, "x");
        let g0 = uniform(Shape::new(2, 4, 4, 4), -2.0, 2.0, i, "g");
        let w = uniform(Shape::new(2, 3, 3, 3), -1.0, 1.0, i, "w");
        let r = uniform(Shape::new(2, 2, 8, 8), -1.0, 1.0, i, "r");
        let downstream = |t: &mut Tape, y| {
            let wv = t.constant(w.clone());
            let z = t.conv2d(y, wv, None, 1, 1).unwrap();
            t.weighted_sum(z, &r).unwrap()
        };
        let mut t = Tape::new();
        let x = t.param("x", &x0);
        let g = t.constant(g0);
        let gv = gp.bind(&mut t, "gate");
        let (_, map) = gated_skip(&mut t, x, g, &gv, 0).unwrap();
        let alpha = t.detach(map.alpha);
        let y = apply_gate(&mut t, x, alpha).unwrap();
        let l = downstream(&mut t, y);
        let a = t.value(alpha).clone();
        let gated = t.backward(l).unwrap().wrt(x).unwrap().clone();
        let mut t = Tape::new();
        let x = t.param("x", &x0);
        let l = downstream(&mut t, x);
        let plain = t.backward(l).unwrap().wrt(x).unwrap().clone();
        let want = Tensor::from_fn(plain.shape(), |n, c, yy, xx| a.at(n, 0, yy, xx) * plain.at(n, c, yy, xx));
        worst = worst.max(max_diff(&gated, &want));
    }
    v.record(
        2,
        "gradient scaling law",
        worst < 1e-12,
        format!("{cases} random 8x8 cases, max |dL/dx - α⊙dL/dx_ungated| = {worst:.2e} (< 1e-12)"),
    );
}

// ---- 3 ---------------------------------------------------------------------

fn alpha_of(p: &AttentionGateParams, seed: u64) -> Tensor {
    let mut t = Tape::new();
    let x = t.constant(uniform(Shape::new(2, 3, 8, 8), -2.0, 2.0, seed, "x"));
    let g = t.constant(uniform(Shape::new(2, 4, 4, 4), -2.0, 2.0, seed, "g"));
    let gv = p.bind(&mut t, "gate");
    let (_, map) = gated_skip(&mut t, x, g, &gv, 0).unwrap();
    t.value(map.alpha).clone()
}

fn attention_invariants(v: &mut Verdicts) {
    let (mut out_of_range, mut worst_sum) = (0usize, 0.0f64);
    for i in 0..1000u64 {
        let norm = NORMS[(i % 3) as usize];
        let grid = if (i / 3) % 2 == 0 { GridMode::UpToX } else { GridMode::DownToG };
        let a = alpha_of(&AttentionGateParams::random(gate_cfg(norm, grid, 1 + (i % 2) as usize), i).unwrap(), 10_000 + i);
        let s = a.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = a.plane(n, c);
                if norm == Normalization::Sigmoid {
                    out_of_range += plane.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
                } else {
                    out_of_range += plane.iter().filter(|&&v| v < 0.0).count();
                    worst_sum = worst_sum.max((plane.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    let pass_cfg = gate_cfg(Normalization::Sigmoid, GridMode::UpToX, 1);
    let p = AttentionGateParams::init_passthrough(pass_cfg, 1).unwrap();
    let min_pass = (0..100)
        .map(|i| alpha_of(&p, 50_000 + i).data().iter().cloned().fold(f64::INFINITY, f64::min))
        .fold(f64::INFINITY, f64::min);
    v.record(
        3,
        "attention invariants",
        out_of_range == 0 && worst_sum < 1e-9 && min_pass >= 0.95,
        format!(
            "1000 evaluations: {out_of_range} coefficients out of range, worst |Σα-1| {worst_sum:.1e} (< 1e-9); passthrough min α {min_pass:.4} (≥ 0.95) on 100 inputs"
        ),
    );
}

// ---- 4 ---------------------------------------------------------------------

fn identity_equivalence(v: &mut Verdicts) {
    let images = Tensor::stack(
        &gen_seg(3, 0, 3, &RunConfig::defaults(Task::Seg).seg_params())
            .unwrap()
            .into_iter()
            .map(|s| s.image)
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let mut mismatches = Vec::new();
    for mode in [BnMode::Train, BnMode::Eval] {
        let ucfg = UNetConfig {
            depth: 3,
            ..UNetConfig::default()
        };
        let gated = UNet::build(ucfg.clone(), 5).unwrap();
        let plain = UNet::build(UNetConfig { gated: false, ..ucfg }, 5).unwrap();
        let run = |net: &UNet, g: GateOverride| {
            let mut t = Tape::new();
            let mut ctx = Ctx::new(&net.params, mode);
            let x = t.constant(images.clone());
            let out = net.forward(&mut t, &mut ctx, x, g).unwrap();
            t.value(out.logits).clone()
        };
        if run(&gated, GateOverride::Constant(1.0)) != run(&plain, GateOverride::Learned) {
            mismatches.push(format!("unet/{mode:?}"));
        }
        for agg in [Aggregation::ConcatFc, Aggregation::PerScaleMean, Aggregation::PerScaleMax, Aggregation::DeepSupFinetune] {
            let ccfg = ClassifierConfig {
                aggregation: agg,
                ..ClassifierConfig::default()
            };
            let gated = Classifier::build(ccfg.clone(), 5).unwrap();
            let plain = Classifier::build(ClassifierConfig { gated: false, ..ccfg }, 5).unwrap();
            let run = |net: &Classifier, p: Pooling| {
                let mut t = Tape::new();
                let mut ctx = Ctx::new(&net.params, mode);
                let x = t.constant(images.clone());
                let out = net.forward(&mut t, &mut ctx, x, p).unwrap();
                t.value(out.logits).clone()
            };
            if run(&gated, Pooling::Uniform) != run(&plain, Pooling::Learned) {
                mismatches.push(format!("classifier/{agg:?}/{mode:?}"));
            }
        }
    }
    v.record(
        4,
        "identity-gate equivalence",
        mismatches.is_empty(),
        format!("U-Net α≡1 and classifier uniform α, 10 comparisons bit-exact; mismatches {mismatches:?}"),
    );
}

// ---- 5-8: trained models ---------------------------------------------------

struct Trained {
    cfg: RunConfig,
    ckpt: PathBuf,
    test: agkit::metrics::MetricsRecord,
}

fn run_experiment(task: Task, root: &Path) -> (Vec<(Trained, Trained)>, f64) {
    let t = Instant::now();
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let one = |model: Model| {
            let mut cfg = RunConfig::defaults(task);
            cfg.seed = seed;
            cfg.model = model;
            cfg.out = root.join(cfg.run_id());
            commands::train(&cfg).unwrap();
            let ckpt = commands::checkpoint_path(&cfg, None);
            let test = commands::eval(&cfg, &ckpt).unwrap();
            Trained { cfg, ckpt, test }
        };
        let baseline = one(Model::Baseline);
        let gated = one(Model::Gated);
        pairs.push((baseline, gated));
    }
    (pairs, t.elapsed().as_secs_f64())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let all: Vec<f64> = v.collect();
    all.iter().sum::<f64>() / all.len() as f64
}

fn segmentation_trend(v: &mut Verdicts, runs: &[(Trained, Trained)], secs: f64) {
    let rec = |t: &Trained| t.test.class(1).recall;
    let dsc = |t: &Trained| t.test.class(1).dsc;
    let (rb, rg) = (mean(runs.iter().map(|p| rec(&p.0))), mean(runs.iter().map(|p| rec(&p.1))));
    let (db, dg) = (mean(runs.iter().map(|p| dsc(&p.0))), mean(runs.iter().map(|p| dsc(&p.1))));
    let deltas: Vec<f64> = runs.iter().map(|p| dsc(&p.1) - dsc(&p.0)).collect();
    let wins = deltas.iter().filter(|&&d| d >= 0.01).count();
    v.record(
        5,
        "segmentation recall/DSC trend",
        rg >= rb && dg >= db && wins >= 3 && secs < TWENTY_MINUTES,
        format!(
            "small-target recall gated {rg:.4} vs baseline {rb:.4}, DSC {dg:.4} vs {db:.4}, per-seed ΔDSC {:?} ({wins}/5 ≥ +0.01), {secs:.0}s",
            deltas.iter().map(|d| format!("{d:+.4}")).collect::<Vec<_>>()
        ),
    );
}

fn classification_trend(v: &mut Verdicts, runs: &[(Trained, Trained)], secs: f64) {
    let prec: Vec<(f64, f64)> = runs.iter().map(|p| (p.0.test.macro_precision(), p.1.test.macro_precision())).collect();
    let wins = prec.iter().filter(|(b, g)| g >= b).count();
    v.record(
        6,
        "classification precision trend",
        wins >= 4 && secs < TWENTY_MINUTES,
        format!(
            "macro precision gated vs baseline per seed {:?} ({wins}/5 gated ≥ baseline), {secs:.0}s",
            prec.iter().map(|(b, g)| format!("{g:.4}/{b:.4}")).collect::<Vec<_>>()
        ),
    );
}

/// Share of attention mass inside `region` divided by the region's area share.
fn concentration(map: &Tensor, region: &[bool], h: usize, w: usize) -> f64 {
    let s = map.shape();
    let single = Tensor::new(Shape::new(1, 1, s.h, s.w), map.plane(0, 0).to_vec()).unwrap();
    let up = single.upsample_bilinear(h, w).unwrap();
    let total: f64 = up.data().iter().sum();
    let inside: f64 = up.data().iter().zip(region).filter(|(_, &r)| r).map(|(a, _)| a).sum();
    let area = region.iter().filter(|&&r| r).count() as f64 / region.len() as f64;
    (inside / total) / area
}

fn attention_concentration(v: &mut Verdicts, seg: &[(Trained, Trained)], cls: &[(Trained, Trained)]) {
    let (mut seg_hits, mut seg_n) = (0, 0);
    for (_, g) in seg {
        let Net::Seg(net) = Net::load(&g.cfg, &g.ckpt).unwrap() else { unreachable!() };
        for s in gen_seg(g.cfg.seed, Split::Test.offset(), g.cfg.n_test, &g.cfg.seg_params()).unwrap() {
            let (_, maps) = net.predict(&s.image).unwrap();
            let region: Vec<bool> = s.mask.iter().map(|&l| l == 1).collect();
            seg_n += 1;
            seg_hits += usize::from(concentration(&maps[0], &region, 32, 32) >= 2.0);
        }
    }
    let (mut cls_hits, mut cls_n) = (0, 0);
    for (_, g) in cls {
        let Net::Cls(net) = Net::load(&g.cfg, &g.ckpt).unwrap() else { unreachable!() };
        for s in gen_cls(g.cfg.seed, Split::Test.offset(), g.cfg.n_test, &g.cfg.cls_params()).unwrap() {
            let Some(b) = s.bbox else { continue };
            let (_, maps) = net.predict(&s.image).unwrap();
            let region: Vec<bool> = (0..32 * 32).map(|i| b.contains(i / 32, i % 32)).collect();
            cls_n += 1;
            cls_hits += usize::from(concentration(&maps[0], &region, 32, 32) >= 2.0);
        }
    }
    let (fs, fc) = (seg_hits as f64 / seg_n as f64, cls_hits as f64 / cls_n as f64);
    v.record(
        7,
        "attention concentration",
        fs >= 0.8 && fc >= 0.8,
        format!(
            "mass share ≥ 2x area share on {:.1}% of segmentation test images ({seg_n}, small target) and {:.1}% of classification foreground test images ({cls_n}); need ≥ 80%",
            100.0 * fs,
            100.0 * fc
        ),
    );
}

fn weak_localization(v: &mut Verdicts, cls: &[(Trained, Trained)]) {
    let mut worst = f64::INFINITY;
    let mut per_seed = Vec::new();
    for (_, g) in cls {
        let out = commands::localize_cmd(&g.cfg, &g.ckpt).unwrap();
        let rel: Vec<f64> = out.score.per_class.iter().flatten().map(|c| c.relative_correctness).collect();
        let m = rel.iter().cloned().fold(f64::INFINITY, f64::min);
        worst = worst.min(m);
        per_seed.push(format!("{m:.3}"));
    }
    let rect = BoundingBox::new(5, 4, 28, 27).unwrap();
    let mut rng = rng_for(11, "rectangle");
    let map = Tensor::from_fn(Shape::new(1, 1, 32, 32), |_, _, y, x| {
        f64::from(u8::from(rect.contains(y, x))) + rng.random_range(-0.05..0.05)
    });
    let lc = LocalizeConfig { tau: 0.5, blur: 1.0 };
    let a = localize(std::slice::from_ref(&map), 32, 32, &lc).unwrap();
    let b = localize(std::slice::from_ref(&map), 32, 32, &lc).unwrap();
    let iou = a.bbox.iou(&rect);
    v.record(
        8,
        "weakly supervised localization",
        worst >= 0.7 && iou > 0.8 && a == b,
        format!("lowest per-class relative correctness per seed {per_seed:?} (≥ 0.70); rectangle oracle IoU {iou:.3} (> 0.8), repeat identical {}", a == b),
    );
}

// ---- 9 ---------------------------------------------------------------------

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, co, oy, ox| {
        let mut s = b.data()[co];
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
        s
    })
}

fn pool_oracle(x: &Tensor, k: usize, max: bool) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h / k, s.w / k), |n, c, oy, ox| {
        let window = (0..k * k).map(|i| x.at(n, c, oy * k + i / k, ox * k + i % k));
        if max {
            window.fold(f64::NEG_INFINITY, f64::max)
        } else {
            window.sum::<f64>() / (k * k) as f64
        }
    })
}

fn bilinear_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    let coord = |d: usize, inn: usize, out: usize| {
        let src = ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64);
        let lo = src.floor() as usize;
        ((lo), (lo + 1).min(inn - 1), src - lo as f64)
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

fn bfs_labels(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut labels = vec![0; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            let mut nbrs = Vec::with_capacity(4);
            if y > 0 {
                nbrs.push(i - w);
            }
            if y + 1 < h {
                nbrs.push(i + w);
            }
            if x > 0 {
                nbrs.push(i - 1);
            }
            if x + 1 < w {
                nbrs.push(i + 1);
            }
            for j in nbrs {
                if mask[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    labels
}

fn oracle_equivalence(v: &mut Verdicts) {
    let instances = 60u64;
    let mut worst = [0.0f64; 5];
    let mut cc_mismatch = 0;
    for i in 0..instances {
        let mut rng = rng_for(i, "oracle-shapes");
        let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), 2 * rng.random_range(2..6), 2 * rng.random_range(2..6));
        let x = uniform(Shape::new(n, c, h, w), -2.0, 2.0, i, "ox");
        let co = rng.random_range(1..4);
        let k = [1, 3][rng.random_range(0..2)];
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let wt = uniform(Shape::new(co, c, k, k), -1.0, 1.0, i, "ow");
        let b = uniform(Shape::new(1, co, 1, 1), -1.0, 1.0, i, "ob");
        let (oh, ow) = (h + rng.random_range(0..9), w + rng.random_range(0..9));
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (wv, bv) = (t.constant(wt.clone()), t.constant(b.clone()));
        let conv = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let mp = t.max_pool2d(xv, 2, 2).unwrap();
        let ap = t.avg_pool2d(xv, 2, 2).unwrap();
        let up = t.upsample_bilinear(xv, oh, ow).unwrap();
        let gap = t.reduce(Reduction::GlobalAvgPool, xv).unwrap();
        let sum = t.reduce(Reduction::SpatialSum, xv).unwrap();
        let gap_oracle = Tensor::from_fn(Shape::new(n, c, 1, 1), |nn, cc, _, _| x.plane(nn, cc).iter().sum::<f64>() / (h * w) as f64);
        let sum_oracle = Tensor::from_fn(Shape::new(n, c, 1, 1), |nn, cc, _, _| x.plane(nn, cc).iter().sum::<f64>());
        worst[0] = worst[0].max(max_diff(t.value(conv), &conv_oracle(&x, &wt, &b, stride, pad)));
        worst[1] = worst[1].max(max_diff(t.value(mp), &pool_oracle(&x, 2, true)));
        worst[1] = worst[1].max(max_diff(t.value(ap), &pool_oracle(&x, 2, false)));
        worst[2] = worst[2].max(max_diff(t.value(up), &bilinear_oracle(&x, oh, ow)));
        worst[3] = worst[3].max(max_diff(t.value(gap), &gap_oracle)).max(max_diff(t.value(sum), &sum_oracle));
        let density = rng.random_range(0.2..0.8);
        let mask: Vec<bool> = (0..h * w * 4).map(|_| rng.random_bool(density)).collect();
        if connected_components(&mask, 2 * h, 2 * w).labels != bfs_labels(&mask, 2 * h, 2 * w) {
            cc_mismatch += 1;
        }
    }
    let pass = worst[..4].iter().all(|&d| d <= 1e-12) && cc_mismatch == 0;
    v.record(
        9,
        "oracle equivalence",
        pass,
        format!(
            "{instances} instances: conv {:.1e}, pool {:.1e}, upsample {:.1e}, reduce {:.1e} (≤ 1e-12), connected components {cc_mismatch} mismatches",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

// ---- 10 --------------------------------------------------------------------

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(v: &mut Verdicts, root: &Path) {
    let run_all = |dir: &Path| {
        let mut seg = RunConfig::parse("task = seg\nepochs = 2\nn_train = 16\nn_val = 4\nn_test = 6\nbatch_size = 4\nbase_filters = 4\n").unwrap();
        seg.out = dir.join("seg");
        commands::train(&seg).unwrap();
        let ck = commands::checkpoint_path(&seg, None);
        commands::eval(&seg, &ck).unwrap();
        commands::export_attention(&seg, &ck).unwrap();
        let mut cls =
            RunConfig::parse("task = cls\nepochs = 2\nn_train = 64\nn_val = 16\nn_test = 30\nbatch_size = 16\nbase_width = 4\naugment = true\n").unwrap();
        cls.out = dir.join("cls");
        commands::train(&cls).unwrap();
        let ck = commands::checkpoint_path(&cls, None);
        commands::eval(&cls, &ck).unwrap();
        commands::localize_cmd(&cls, &ck).unwrap();
        commands::export_attention(&cls, &ck).unwrap();
        let mut report = Vec::new();
        commands::gradcheck(commands::gradcheck_cases(Scope::Gate).unwrap(), 3, &mut report).unwrap();
        std::fs::write(dir.join("gradcheck.txt"), report).unwrap();
        tree_bytes(dir)
    };
    let a = run_all(&root.join("first"));
    let b = run_all(&root.join("second"));
    let csvs = a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "csv")).count();
    let ckpts = a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "agk")).count();
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    v.record(
        10,
        "determinism",
        a.len() == b.len() && differing.is_empty(),
        format!("{} files ({csvs} CSV, {ckpts} checkpoints) from train/eval/localize/export/gradcheck repeated: differing {differing:?}", a.len()),
    );
}

#[test]
fn acceptance() {
    let tmp = TempDir::new().unwrap();
    let mut v = Verdicts(Vec::new());
    gradient_fidelity(&mut v);
    scaling_law(&mut v);
    attention_invariants(&mut v);
    identity_equivalence(&mut v);
    let (seg, seg_secs) = run_experiment(Task::Seg, &tmp.path().join("seg"));
    segmentation_trend(&mut v, &seg, seg_secs);
    let (cls, cls_secs) = run_experiment(Task::Cls, &tmp.path().join("cls"));
    classification_trend(&mut v, &cls, cls_secs);
    attention_concentration(&mut v, &seg, &cls);
    weak_localization(&mut v, &cls);
    oracle_equivalence(&mut v);
    determinism(&mut v, &tmp.path().join("determinism"));
    let failed: Vec<usize> = v.0.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", v.0.len() - failed.len(), v.0.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
