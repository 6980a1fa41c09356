//! The five commands, as library functions writing into the run directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use agkit::checkpoint;
use agkit::classifier::{self, train_cls, Classifier};
use agkit::gradcheck::GradCheckConfig;
use agkit::gradsuite;
use agkit::metrics::{cls_metrics, mean_records, seg_metrics, MetricsRecord};
use agkit::synth::{gen_cls, gen_seg, ClsSample, SegSample, Split};
use agkit::unet::{self, train_seg, UNet};
use agkit::wsl::{localize, wsl_score, BoundingBox, Localization, WslScore};
use agkit::{Error, Result, Tensor};

use crate::config::{RunConfig, Task};
use crate::imageio::{quantize, to_bytes_unit, Image};

pub const CHECKPOINT: &str = "checkpoint.agk";
pub const METRICS: &str = "metrics.csv";
pub const EVAL: &str = "eval.csv";
pub const BOXES: &str = "boxes.csv";
pub const WSL: &str = "wsl.csv";
pub const ATTENTION_DIR: &str = "attention";
pub const OVERLAY_DIR: &str = "overlays";
pub const RANGES: &str = "ranges.csv";

/// Process exit status for an error: 2 for usage, config and shape problems,
/// 3 for numeric aborts, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::InvalidArgument { .. }
        | Error::ShapeMismatch { .. }
        | Error::ParameterShape { .. }
        | Error::UnknownParameter(_)
        | Error::Checkpoint(_)
        | Error::Io(_) => 2,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => 3,
        _ => 1,
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Thread cap for evaluation from `AGKIT_THREADS`, default 1.
pub fn eval_threads() -> usize {
    std::env::var("AGKIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over contiguous chunks on up to `threads` scoped threads and
/// concatenates the results in input order.
fn fan_out<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&[T]) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() < 2 {
        return f(items);
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub struct SegData {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

pub fn seg_data(cfg: &RunConfig) -> Result<SegData> {
    let p = cfg.seg_params();
    Ok(SegData {
        train: gen_seg(cfg.seed, Split::Train.offset(), cfg.n_train, &p)?,
        val: gen_seg(cfg.seed, Split::Val.offset(), cfg.n_val, &p)?,
        test: gen_seg(cfg.seed, Split::Test.offset(), cfg.n_test, &p)?,
    })
}

pub struct ClsData {
    pub train: Vec<ClsSample>,
    pub val: Vec<ClsSample>,
    pub test: Vec<ClsSample>,
}

pub fn cls_data(cfg: &RunConfig) -> Result<ClsData> {
    let p = cfg.cls_params();
    Ok(ClsData {
        train: gen_cls(cfg.seed, Split::Train.offset(), cfg.n_train, &p)?,
        val: gen_cls(cfg.seed, Split::Val.offset(), cfg.n_val, &p)?,
        test: gen_cls(cfg.seed, Split::Test.offset(), cfg.n_test, &p)?,
    })
}

/// A trained or freshly built model of either task.
pub enum Net {
    Seg(UNet),
    Cls(Classifier),
}

impl Net {
    pub fn build(cfg: &RunConfig) -> Result<Net> {
        Ok(match cfg.task {
            Task::Seg => Net::Seg(UNet::build(cfg.unet(), cfg.seed)?),
            Task::Cls => Net::Cls(Classifier::build(cfg.classifier(), cfg.seed)?),
        })
    }

    /// Builds the model described by `cfg` and fills it from `path`.
    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Net> {
        let mut net = Net::build(cfg)?;
        let loaded = checkpoint::load(path)?;
        checkpoint::restore_into(net.params_mut(), &loaded)?;
        Ok(net)
    }

    pub fn params(&self) -> &agkit::ParamStore {
        match self {
            Net::Seg(n) => &n.params,
            Net::Cls(n) => &n.params,
        }
    }

    fn params_mut(&mut self) -> &mut agkit::ParamStore {
        match self {
            Net::Seg(n) => &mut n.params,
            Net::Cls(n) => &mut n.params,
        }
    }

    /// Attention maps `(1, m, h, w)` per gate for one image `(1, 1, H, W)`.
    pub fn attention(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        Ok(match self {
            Net::Seg(n) => n.predict(image)?.1,
            Net::Cls(n) => n.predict(image)?.1,
        })
    }
}

pub fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(CHECKPOINT))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub const METRIC_HEADER: [&str; 9] = ["run_id", "epoch", "class", "dsc", "precision", "recall", "f1", "s2s_mm", "iou"];

fn metric_rows<W: Write>(w: &mut csv::Writer<W>, run_id: &str, epoch: &str, rec: &MetricsRecord) -> Result<()> {
    for c in &rec.per_class {
        w.write_record([
            run_id.to_string(),
            epoch.to_string(),
            c.class.to_string(),
            fmt(c.dsc),
            fmt(c.precision),
            fmt(c.recall),
            fmt(c.f1),
            c.s2s_mm.map(fmt).unwrap_or_default(),
            fmt(c.iou),
        ])
        .map_err(csv_err)?;
    }
    Ok(())
}

fn metrics_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRIC_HEADER).map_err(csv_err)?;
    Ok(w)
}

/// Writes one PGM per gate (and sub-gate channel) and returns the sidecar rows
/// `(file, gate, min, max)`.
fn write_maps(dir: &Path, stem: &str, maps: &[Tensor]) -> Result<Vec<(String, usize, f64, f64)>> {
    let mut rows = Vec::new();
    for (g, m) in maps.iter().enumerate() {
        let s = m.shape();
        for c in 0..s.c {
            let name = if s.c == 1 {
                format!("{stem}_gate{g}.pgm")
            } else {
                format!("{stem}_gate{g}_c{c}.pgm")
            };
            let (bytes, lo, hi) = quantize(m.plane(0, c));
            Image::gray(s.w, s.h, bytes).save(&dir.join(&name))?;
            rows.push((name, g, lo, hi));
        }
    }
    Ok(rows)
}

fn first_image(cfg: &RunConfig) -> Result<Option<Tensor>> {
    Ok(match cfg.task {
        Task::Seg => gen_seg(cfg.seed, Split::Val.offset(), 1, &cfg.seg_params())?.pop().map(|s| s.image),
        Task::Cls => gen_cls(cfg.seed, Split::Val.offset(), 1, &cfg.cls_params())?.pop().map(|s| s.image),
    })
}

pub struct TrainSummary {
    pub epochs: usize,
    pub final_val: Option<MetricsRecord>,
}

/// Trains, writing the checkpoint, per-epoch validation metrics and the
/// monitoring sample's attention maps after every epoch.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    std::fs::create_dir_all(cfg.out.join(ATTENTION_DIR))?;
    let run_id = cfg.run_id();
    let mut metrics = metrics_writer(&cfg.out.join(METRICS))?;
    let mut ranges = csv::Writer::from_path(cfg.out.join(ATTENTION_DIR).join(RANGES)).map_err(csv_err)?;
    ranges.write_record(["file", "epoch", "gate", "min", "max"]).map_err(csv_err)?;
    let monitor = first_image(cfg)?;
    let attention_dir = cfg.out.join(ATTENTION_DIR);
    let mut on_epoch = |epoch: usize, val: Option<&MetricsRecord>, maps: Vec<Tensor>| -> Result<()> {
        if let Some(rec) = val {
            metric_rows(&mut metrics, &run_id, &epoch.to_string(), rec)?;
        }
        for (file, gate, lo, hi) in write_maps(&attention_dir, &format!("epoch{epoch:03}"), &maps)? {
            ranges
                .write_record([file, epoch.to_string(), gate.to_string(), fmt(lo), fmt(hi)])
                .map_err(csv_err)?;
        }
        Ok(())
    };
    let (net, history_len, final_val) = match cfg.task {
        Task::Seg => {
            let data = seg_data(cfg)?;
            let mut net = UNet::build(cfg.unet(), cfg.seed)?;
            let hist = train_seg(&mut net, &data.train, &data.val, &cfg.seg_train(), |n, e| {
                let maps = match &monitor {
                    Some(img) => n.predict(img)?.1,
                    None => Vec::new(),
                };
                on_epoch(e.epoch, e.val.as_ref(), maps)
            })?;
            let last = hist.last().and_then(|e| e.val.clone());
            (Net::Seg(net), hist.len(), last)
        }
        Task::Cls => {
            let data = cls_data(cfg)?;
            let mut net = Classifier::build(cfg.classifier(), cfg.seed)?;
            let hist = train_cls(&mut net, &data.train, &data.val, &cfg.cls_train(), |n, e| {
                let maps = match &monitor {
                    Some(img) => n.predict(img)?.1,
                    None => Vec::new(),
                };
                on_epoch(e.epoch, e.val.as_ref(), maps)
            })?;
            let last = hist.last().and_then(|e| e.val.clone());
            (Net::Cls(net), hist.len(), last)
        }
    };
    metrics.flush()?;
    ranges.flush()?;
    checkpoint::save(net.params(), &cfg.out.join(CHECKPOINT))?;
    Ok(TrainSummary {
        epochs: history_len,
        final_val,
    })
}

/// Test-split metrics of a checkpoint, written to `eval.csv`.
pub fn eval(cfg: &RunConfig, ckpt: &Path) -> Result<MetricsRecord> {
    let net = Net::load(cfg, ckpt)?;
    let threads = eval_threads();
    let rec = match &net {
        Net::Seg(n) => {
            let test = gen_seg(cfg.seed, Split::Test.offset(), cfg.n_test, &cfg.seg_params())?;
            let preds = fan_out(&test, threads, |c| unet::predict_labels(n, c, 16))?;
            let recs: Vec<MetricsRecord> = preds
                .iter()
                .zip(&test)
                .map(|(p, s)| seg_metrics(p, &s.mask, cfg.height, cfg.width, cfg.classes, cfg.spacing_mm))
                .collect();
            mean_records(&recs).ok_or_else(|| Error::InvalidArgument {
                op: "eval",
                msg: "empty test split".into(),
            })?
        }
        Net::Cls(n) => {
            let test = gen_cls(cfg.seed, Split::Test.offset(), cfg.n_test, &cfg.cls_params())?;
            let pred = fan_out(&test, threads, |c| classifier::predict_classes(n, c, 64))?;
            let gt: Vec<usize> = test.iter().map(|s| s.label).collect();
            cls_metrics(&pred, &gt, n.cfg.n_classes)
        }
    };
    std::fs::create_dir_all(&cfg.out)?;
    let mut w = metrics_writer(&cfg.out.join(EVAL))?;
    metric_rows(&mut w, &cfg.run_id(), "test", &rec)?;
    w.flush()?;
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Gate,
    Unet,
    Classifier,
    All,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ops" => Ok(Scope::Ops),
            "gate" => Ok(Scope::Gate),
            "unet" => Ok(Scope::Unet),
            "classifier" => Ok(Scope::Classifier),
            "all" => Ok(Scope::All),
            _ => Err(format!("unknown scope `{s}` (ops, gate, unet, classifier, all)")),
        }
    }
}

pub fn gradcheck_cases(scope: Scope) -> Result<Vec<gradsuite::GradCase>> {
    let mut cases = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        cases.extend(gradsuite::op_cases());
    }
    if matches!(scope, Scope::Gate | Scope::All) {
        cases.extend(gradsuite::gate_cases()?);
    }
    if matches!(scope, Scope::Unet | Scope::All) {
        cases.push(gradsuite::unet_case()?);
    }
    if matches!(scope, Scope::Classifier | Scope::All) {
        cases.push(gradsuite::classifier_case()?);
    }
    Ok(cases)
}

/// Runs `cases`, printing one line per target and every failing coordinate.
/// Returns whether all passed.
pub fn gradcheck(cases: Vec<gradsuite::GradCase>, seed: u64, out: &mut impl Write) -> Result<bool> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut ok = true;
    for r in gradsuite::run(cases, &cfg)? {
        let pass = r.passed();
        ok &= pass;
        writeln!(
            out,
            "{} {}: max rel err {:.3e} (raw {:.3e}, threshold {:.0e}, {} checked, {} excluded)",
            if pass { "PASS" } else { "FAIL" },
            r.name,
            r.report.max_rel_error(),
            r.report.max_raw_rel_error(),
            r.threshold,
            r.report.checked.len(),
            r.report.excluded.len()
        )?;
        for c in r.report.failures(r.threshold) {
            writeln!(
                out,
                "  {}[{}]: analytic {:e} numeric {:e} rel {:.3e}",
                c.param, c.index, c.analytic, c.numeric, c.rel_error
            )?;
        }
    }
    Ok(ok)
}

/// Boxes from a classifier's attention maps for one image `(1, 1, H, W)`.
pub fn localize_image(net: &Classifier, image: &Tensor, cfg: &RunConfig) -> Result<Localization> {
    let (_, maps) = net.predict(image)?;
    if maps.is_empty() {
        return Err(Error::InvalidArgument {
            op: "localize",
            msg: "model has no attention gates".into(),
        });
    }
    let single: Vec<Tensor> = maps
        .iter()
        .map(|m| {
            let s = m.shape();
            Tensor::new(agkit::Shape::new(1, 1, s.h, s.w), m.plane(0, 0).to_vec())
        })
        .collect::<Result<_>>()?;
    localize(&single, cfg.height, cfg.width, &cfg.localize())
}

pub struct LocalizeOutput {
    pub score: WslScore,
    pub boxes: Vec<(usize, BoundingBox, BoundingBox)>,
}

/// Localizes every foreground test sample; writes `boxes.csv`, `wsl.csv`
/// and overlays (ground truth green, prediction red) for the first
/// `export_count` of them.
pub fn localize_cmd(cfg: &RunConfig, ckpt: &Path) -> Result<LocalizeOutput> {
    let net = match Net::load(cfg, ckpt)? {
        Net::Cls(n) => n,
        Net::Seg(_) => {
            return Err(Error::InvalidArgument {
                op: "localize",
                msg: "localization needs task = cls".into(),
            })
        }
    };
    let test = gen_cls(cfg.seed, Split::Test.offset(), cfg.n_test, &cfg.cls_params())?;
    let fg: Vec<(usize, &ClsSample)> = test.iter().enumerate().filter(|(_, s)| s.label > 0).collect();
    let overlay_dir = cfg.out.join(OVERLAY_DIR);
    std::fs::create_dir_all(&overlay_dir)?;
    let run_id = cfg.run_id();
    let mut boxes = csv::Writer::from_path(cfg.out.join(BOXES)).map_err(csv_err)?;
    boxes
        .write_record(["run_id", "image_id", "class", "x0", "y0", "x1", "y1", "gt_x0", "gt_y0", "gt_x1", "gt_y1", "iou", "selection"])
        .map_err(csv_err)?;
    let mut found = Vec::new();
    for (k, &(i, s)) in fg.iter().enumerate() {
        let gt = s.bbox.ok_or_else(|| Error::InvalidArgument {
            op: "localize",
            msg: format!("foreground sample {i} has no box"),
        })?;
        let loc = localize_image(&net, &s.image, cfg)?;
        let b = loc.bbox;
        boxes
            .write_record([
                run_id.clone(),
                i.to_string(),
                s.label.to_string(),
                b.x0.to_string(),
                b.y0.to_string(),
                b.x1.to_string(),
                b.y1.to_string(),
                gt.x0.to_string(),
                gt.y0.to_string(),
                gt.x1.to_string(),
                gt.y1.to_string(),
                fmt(b.iou(&gt)),
                format!("{:?}", loc.selection),
            ])
            .map_err(csv_err)?;
        if k < cfg.export_count {
            let mut img = Image::gray(cfg.width, cfg.height, to_bytes_unit(s.image.data())).to_rgb();
            img.draw_box(&gt, [0, 255, 0]);
            img.draw_box(&b, [255, 0, 0]);
            img.save(&overlay_dir.join(format!("sample{i:04}.ppm")))?;
        }
        found.push((s.label, b, gt));
    }
    boxes.flush()?;
    let pred: Vec<BoundingBox> = found.iter().map(|f| f.1).collect();
    let gt: Vec<BoundingBox> = found.iter().map(|f| f.2).collect();
    let labels: Vec<usize> = found.iter().map(|f| f.0).collect();
    let score = wsl_score(&pred, &gt, &labels, cfg.n_fg + 1)?;
    let mut w = csv::Writer::from_path(cfg.out.join(WSL)).map_err(csv_err)?;
    w.write_record(["run_id", "class", "count", "mean_iou", "correctness", "relative_correctness"])
        .map_err(csv_err)?;
    for c in score.per_class.iter().flatten() {
        w.write_record([
            run_id.clone(),
            c.class.to_string(),
            c.count.to_string(),
            fmt(c.mean_iou),
            fmt(c.correctness),
            fmt(c.relative_correctness),
        ])
        .map_err(csv_err)?;
    }
    w.write_record([run_id.clone(), "all".into(), pred.len().to_string(), fmt(score.mean_iou), fmt(score.correctness), String::new()])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(LocalizeOutput { score, boxes: found })
}

/// One PGM per gate for each of the first `export_count` test images, with
/// the quantization range in `attention/ranges.csv`.
pub fn export_attention(cfg: &RunConfig, ckpt: &Path) -> Result<Vec<PathBuf>> {
    let net = Net::load(cfg, ckpt)?;
    let images: Vec<Tensor> = match cfg.task {
        Task::Seg => gen_seg(cfg.seed, Split::Test.offset(), cfg.export_count, &cfg.seg_params())?
            .into_iter()
            .map(|s| s.image)
            .collect(),
        Task::Cls => gen_cls(cfg.seed, Split::Test.offset(), cfg.export_count, &cfg.cls_params())?
            .into_iter()
            .map(|s| s.image)
            .collect(),
    };
    let dir = cfg.out.join(ATTENTION_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut ranges = csv::Writer::from_path(dir.join(RANGES)).map_err(csv_err)?;
    ranges.write_record(["file", "sample", "gate", "min", "max"]).map_err(csv_err)?;
    let mut files = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for (file, gate, lo, hi) in write_maps(&dir, &format!("sample{i:04}"), &net.attention(img)?)? {
            files.push(dir.join(&file));
            ranges
                .write_record([file, i.to_string(), gate.to_string(), fmt(lo), fmt(hi)])
                .map_err(csv_err)?;
        }
    }
    ranges.flush()?;
    Ok(files)
}
