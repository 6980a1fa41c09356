//! Deterministic synthetic datasets.
//!
//! Segmentation: a dark, large ellipse (label 2) with a small, faint, deformed
//! blob touching it (label 1), on textured noise that also carries unlabelled
//! faint distractor blobs. The blob's offset is `3·contrast` background noise
//! σ: clearly visible at contrast 1, while at low contrast the small target is
//! recognisable mainly from where it sits relative to the large one.
//!
//! Classification: one small glyph per foreground image among clutter strokes;
//! background images hold clutter only.
//!
//! Every sample is a pure function of `(seed, index)`. Splits use disjoint index
//! ranges (see [`Split`]).

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::params::rng_for;
use crate::tensor::{Shape, Tensor};
use crate::wsl::BoundingBox;

/// Standard deviation of the white background noise.
pub const NOISE_SIGMA: f64 = 0.1;
/// Target offset at contrast 1, in noise-σ units.
pub const FULL_CONTRAST_SIGMAS: f64 = 3.0;
const BASE: f64 = 0.5;
const LARGE_OFFSET: f64 = -3.0 * NOISE_SIGMA;
const PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// First sample index of the split; ranges never overlap for < 2³² samples.
    pub fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
            Split::Test => 2 << 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `(1, 1, H, W)` intensities in `[0, 1]`.
    pub image: Tensor,
    /// Row-major labels.
    pub mask: Vec<usize>,
}

impl SegSample {
    pub fn h(&self) -> usize {
        self.image.shape().h
    }

    pub fn w(&self) -> usize {
        self.image.shape().w
    }

    pub fn area_fraction(&self, class: usize) -> f64 {
        self.mask.iter().filter(|&&l| l == class).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegParams {
    pub h: usize,
    pub w: usize,
    /// Offset of the small target as a fraction of [`FULL_CONTRAST_SIGMAS`] noise σ, in `(0, 1]`.
    pub contrast: f64,
    /// 2 (background + small target) or 3 (plus the large structure).
    pub classes: usize,
}

impl SegParams {
    fn validate(&self) -> Result<()> {
        if self.h < 32 || self.w < 32 {
            return Err(invalid("gen_seg", format!("image {}x{} smaller than 32x32", self.h, self.w)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(invalid("gen_seg", format!("contrast {} outside (0, 1]", self.contrast)));
        }
        if !(2..=3).contains(&self.classes) {
            return Err(invalid("gen_seg", "classes must be 2 or 3"));
        }
        Ok(())
    }
}

/// Ellipse with a sinusoidal radial perturbation.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
    lobes: f64,
    wobble: f64,
    phase: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, cy: f64, cx: f64, r: f64, max_aspect: f64) -> Blob {
        let aspect: f64 = rng.random_range(1.0..max_aspect);
        Blob {
            cy,
            cx,
            ry: r / aspect.sqrt(),
            rx: r * aspect.sqrt(),
            theta: rng.random_range(0.0..PI),
            lobes: f64::from(rng.random_range(2..=4)),
            wobble: rng.random_range(0.05..0.2),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r = (u * u + v * v).sqrt();
        r <= 1.0 + self.wobble * (self.lobes * v.atan2(u) + self.phase).sin()
    }

    fn extent(&self) -> f64 {
        self.rx.max(self.ry) * (1.0 + self.wobble)
    }

    fn inside_frame(&self, h: usize, w: usize, margin: f64) -> bool {
        let e = self.extent() + margin;
        self.cy - e >= 0.0 && self.cx - e >= 0.0 && self.cy + e <= h as f64 - 1.0 && self.cx + e <= w as f64 - 1.0
    }

    fn raster(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| self.contains((i / w) as f64, (i % w) as f64))
            .collect()
    }
}

fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let tex: f64 = waves.iter().map(|(fy, fx, p)| 0.02 * (fy * y + fx * x + p).sin()).sum();
            BASE + tex + noise.sample(rng)
        })
        .collect()
}

fn try_seg(rng: &mut ChaCha8Rng, p: &SegParams) -> Option<SegSample> {
    let (h, w) = (p.h, p.w);
    let (hf, wf) = (h as f64, w as f64);
    let npx = (h * w) as f64;
    let mut labels = vec![0usize; h * w];

    let large = if p.classes == 3 {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let r = (npx * rng.random_range(0.12..0.2) / PI).sqrt();
            let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
            let b = Blob::random(rng, cy, cx, r, 1.6);
            if b.inside_frame(h, w, 1.0) {
                placed = Some(b);
                break;
            }
        }
        let b = placed?;
        let m = b.raster(h, w);
        for (l, &inside) in labels.iter_mut().zip(&m) {
            if inside {
                *l = 2;
            }
        }
        Some(b)
    } else {
        None
    };

    // small target, touching the large structure when there is one
    let mut small = None;
    for _ in 0..PLACEMENT_TRIES {
        let frac = rng.random_range(0.035..0.075);
        let r = (npx * frac / PI).sqrt();
        let (cy, cx) = match large {
            Some(l) => {
                let a = rng.random_range(0.0..2.0 * PI);
                let (dy, dx) = (a.sin(), a.cos());
                let mut t = 0.0;
                while l.contains(l.cy + t * dy, l.cx + t * dx) && t < hf + wf {
                    t += 0.5;
                }
                let d = t + r * rng.random_range(0.5..0.9);
                (l.cy + d * dy, l.cx + d * dx)
            }
            None => (rng.random_range(0.0..hf), rng.random_range(0.0..wf)),
        };
        let b = Blob::random(rng, cy, cx, r, 2.0);
        if !b.inside_frame(h, w, 0.0) {
            continue;
        }
        let m = b.raster(h, w);
        let area = m.iter().zip(&labels).filter(|(&s, &l)| s && l == 0).count() as f64 / npx;
        if (0.03..=0.08).contains(&area) {
            small = Some(m);
            break;
        }
    }
    let small = small?;
    for (l, &s) in labels.iter_mut().zip(&small) {
        if s && *l == 0 {
            *l = 1;
        }
    }

    // faint unlabelled distractors away from both structures
    let mut distractors = vec![false; h * w];
    let wanted = 2;
    let mut placed = 0;
    for _ in 0..PLACEMENT_TRIES {
        if placed == wanted {
            break;
        }
        let r = (npx * rng.random_range(0.008..0.015) / PI).sqrt();
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
            let b = Blob::random(rng, cy, cx, r, 1.5);
        if !b.inside_frame(h, w, 0.0) {
            continue;
        }
        let clear = (0..h * w).all(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            labels[i] == 0 || (y - b.cy).hypot(x - b.cx) > b.extent() + 4.0
        });
        if clear {
            for (d, s) in distractors.iter_mut().zip(b.raster(h, w)) {
                *d |= s;
            }
            placed += 1;
        }
    }
    if placed < wanted {
        return None;
    }

    let offset = p.contrast * FULL_CONTRAST_SIGMAS * NOISE_SIGMA;
    let mut img = texture(rng, h, w);
    for i in 0..h * w {
        if labels[i] == 2 {
            img[i] += LARGE_OFFSET;
        } else if labels[i] == 1 || distractors[i] {
            img[i] += offset;
        }
        img[i] = img[i].clamp(0.0, 1.0);
    }
    Some(SegSample {
        image: Tensor::new(Shape::new(1, 1, h, w), img).ok()?,
        mask: labels,
    })
}

/// Sample `index` of the segmentation stream for `seed`.
pub fn seg_sample(seed: u64, index: u64, p: &SegParams) -> Result<SegSample> {
    p.validate()?;
    for attempt in 0u32.. {
        let mut rng = rng_for(seed, &format!("seg/{index}/{attempt}"));
        if let Some(s) = try_seg(&mut rng, p) {
            return Ok(s);
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// `count` segmentation samples with indices `start..start + count`.
pub fn gen_seg(seed: u64, start: u64, count: usize, p: &SegParams) -> Result<Vec<SegSample>> {
    (0..count as u64).map(|i| seg_sample(seed, start + i, p)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsSample {
    pub image: Tensor,
    /// 0 is background; glyph classes are `1..=n_fg`.
    pub label: usize,
    /// Tight box around the glyph; `None` for background images.
    pub bbox: Option<BoundingBox>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClsParams {
    pub h: usize,
    pub w: usize,
    pub n_fg: usize,
    pub background_ratio: f64,
}

/// Number of distinct glyph shapes available.
pub const GLYPHS: usize = 6;
const GLYPH_OFFSET: f64 = 0.45;

impl ClsParams {
    fn validate(&self) -> Result<()> {
        if !(2..=GLYPHS).contains(&self.n_fg) {
            return Err(invalid("gen_cls", format!("n_fg must be in 2..={GLYPHS}")));
        }
        if !(0.5..=0.95).contains(&self.background_ratio) {
            return Err(invalid("gen_cls", "background_ratio must be in [0.5, 0.95]"));
        }
        if self.h < 16 || self.w < 16 {
            return Err(invalid("gen_cls", "images must be at least 16x16"));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_fg + 1
    }
}

/// Glyph membership in unit coordinates (`u, v ∈ [-1, 1]`).
fn glyph(kind: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match kind {
        // disk
        0 => r <= 0.85,
        // ring
        1 => (0.5..=1.0).contains(&r),
        // plus
        2 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0),
        // triangle pointing up
        3 => v <= 0.8 && v >= -0.9 && u.abs() <= (0.8 - v) * 0.55,
        // two parallel bars
        4 => u.abs() <= 0.9 && (0.35..=0.8).contains(&v.abs()),
        // L corner
        _ => (u >= -0.9 && u <= -0.4 && v.abs() <= 0.9) || (v >= 0.4 && v <= 0.9 && u >= -0.9 && u <= 0.9),
    }
}

fn stroke(rng: &mut ChaCha8Rng, h: usize, w: usize, img: &mut [f64], avoid: Option<&BoundingBox>) {
    let len = rng.random_range(3..=6) as f64;
    let a = rng.random_range(0.0..PI);
    let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let amp = rng.random_range(0.25..0.45);
    let steps = (len * 2.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64 * len - len / 2.0;
        let (y, x) = ((cy + t * a.sin()).round(), (cx + t * a.cos()).round());
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            continue;
        }
        let (y, x) = (y as usize, x as usize);
        if let Some(b) = avoid {
            let grown = BoundingBox {
                x0: b.x0.saturating_sub(1),
                y0: b.y0.saturating_sub(1),
                x1: b.x1 + 1,
                y1: b.y1 + 1,
            };
            if grown.contains(y, x) {
                continue;
            }
        }
        img[y * w + x] = BASE + amp;
    }
}

fn cls_sample(seed: u64, index: u64, label: usize, p: &ClsParams) -> ClsSample {
    let (h, w) = (p.h, p.w);
    let mut rng = rng_for(seed, &format!("cls/{index}"));
    let mut img = texture(&mut rng, h, w);
    let mut bbox = None;
    if label > 0 {
        let size: f64 = rng.random_range(7.0..10.0);
        let half = size / 2.0;
        let theta: f64 = rng.random_range(-20f64..20.0).to_radians();
        let margin = half * 1.5 + 1.0;
        let cy = rng.random_range(margin..h as f64 - margin);
        let cx = rng.random_range(margin..w as f64 - margin);
        let (s, c) = theta.sin_cos();
        let mut found: Option<BoundingBox> = None;
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (c * dx + s * dy) / half;
                let v = (-s * dx + c * dy) / half;
                if glyph(label - 1, u, v) {
                    img[y * w + x] += GLYPH_OFFSET;
                    match &mut found {
                        Some(b) => b.include(y, x),
                        None => found = Some(BoundingBox::point(y, x)),
                    }
                }
            }
        }
        bbox = found;
    }
    let strokes = rng.random_range(3..=6);
    for _ in 0..strokes {
        stroke(&mut rng, h, w, &mut img, bbox.as_ref());
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ClsSample {
        image: Tensor::new(Shape::new(1, 1, h, w), img).expect("sized"),
        label,
        bbox,
    }
}

/// Exact label quota: `round(count · background_ratio)` background images, the
/// rest spread round-robin over the glyph classes, in a seeded shuffled order.
pub fn cls_labels(seed: u64, start: u64, count: usize, p: &ClsParams) -> Result<Vec<usize>> {
    p.validate()?;
    let n_bg = (count as f64 * p.background_ratio).round() as usize;
    let mut labels: Vec<usize> = (0..count)
        .map(|i| if i < n_bg { 0 } else { 1 + (i - n_bg) % p.n_fg })
        .collect();
    labels.shuffle(&mut rng_for(seed, &format!("cls-order/{start}")));
    Ok(labels)
}

/// `count` classification samples with indices `start..start + count`.
pub fn gen_cls(seed: u64, start: u64, count: usize, p: &ClsParams) -> Result<Vec<ClsSample>> {
    let labels = cls_labels(seed, start, count, p)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| cls_sample(seed, start + i as u64, l, p))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Translation by `(dy, dx)`; vacated pixels take the background level.
    Shift(i32, i32),
    /// Keeps the inclusive window and blanks everything outside it.
    Crop(BoundingBox),
}

fn source(op: AugmentOp, h: usize, w: usize, y: usize, x: usize) -> Option<(usize, usize)> {
    match op {
        AugmentOp::HFlip => Some((y, w - 1 - x)),
        AugmentOp::VFlip => Some((h - 1 - y, x)),
        AugmentOp::Shift(dy, dx) => {
            let (sy, sx) = (y as i64 - i64::from(dy), x as i64 - i64::from(dx));
            (sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64).then_some((sy as usize, sx as usize))
        }
        AugmentOp::Crop(b) => b.contains(y, x).then_some((y, x)),
    }
}

/// Applies one spatial op to an image and a per-pixel label map with the same
/// pixel mapping. Out-of-frame pixels become background.
fn remap(image: &Tensor, labels: Option<&[usize]>, op: AugmentOp) -> (Tensor, Option<Vec<usize>>) {
    let s = image.shape();
    let (h, w) = (s.h, s.w);
    let mut out = Tensor::full(s, BASE);
    let mut lab = labels.map(|_| vec![0; h * w]);
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = source(op, h, w, y, x) {
                for c in 0..s.c {
                    *out.at_mut(0, c, y, x) = image.at(0, c, sy, sx);
                }
                if let (Some(l), Some(src)) = (lab.as_mut(), labels) {
                    l[y * w + x] = src[sy * w + sx];
                }
            }
        }
    }
    (out, lab)
}

pub fn augment_seg(sample: &SegSample, op: AugmentOp) -> SegSample {
    let (image, mask) = remap(&sample.image, Some(&sample.mask), op);
    SegSample {
        image,
        mask: mask.expect("labels given"),
    }
}

/// Applies `op` to a classification sample. Fails when a shift or crop would
/// push the glyph out of frame.
pub fn augment_cls(sample: &ClsSample, op: AugmentOp) -> Result<ClsSample> {
    let s = sample.image.shape();
    let (h, w) = (s.h, s.w);
    let bbox = match (sample.bbox, op) {
        (None, _) => None,
        (Some(b), AugmentOp::HFlip) => Some(BoundingBox { x0: w - 1 - b.x1, x1: w - 1 - b.x0, ..b }),
        (Some(b), AugmentOp::VFlip) => Some(BoundingBox { y0: h - 1 - b.y1, y1: h - 1 - b.y0, ..b }),
        (Some(b), AugmentOp::Shift(dy, dx)) => {
            let mv = |v: usize, d: i32, n: usize| {
                let t = v as i64 + i64::from(d);
                (0..n as i64).contains(&t).then_some(t as usize)
            };
            match (mv(b.x0, dx, w), mv(b.y0, dy, h), mv(b.x1, dx, w), mv(b.y1, dy, h)) {
                (Some(x0), Some(y0), Some(x1), Some(y1)) => Some(BoundingBox { x0, y0, x1, y1 }),
                _ => return Err(invalid("augment", "shift moves the object out of frame")),
            }
        }
        (Some(b), AugmentOp::Crop(win)) => {
            if win.intersection(&b) != b.area() {
                return Err(invalid("augment", "crop cuts the object"));
            }
            Some(b)
        }
    };
    let (image, _) = remap(&sample.image, None, op);
    Ok(ClsSample {
        image,
        label: sample.label,
        bbox,
    })
}

/// Seeded random training augmentation: optional flips and a shift of at most
/// `max_shift` pixels. Classification shifts are shrunk to keep the glyph in frame.
pub struct Augmenter {
    rng: ChaCha8Rng,
    pub max_shift: i32,
}

impl Augmenter {
    pub fn new(seed: u64, max_shift: i32) -> Self {
        Augmenter {
            rng: rng_for(seed, "augment"),
            max_shift: max_shift.clamp(0, 4),
        }
    }

    fn ops(&mut self) -> Vec<AugmentOp> {
        let mut ops = Vec::new();
        if self.rng.random_bool(0.5) {
            ops.push(AugmentOp::HFlip);
        }
        if self.rng.random_bool(0.5) {
            ops.push(AugmentOp::VFlip);
        }
        let m = self.max_shift;
        let (dy, dx) = (self.rng.random_range(-m..=m), self.rng.random_range(-m..=m));
        if (dy, dx) != (0, 0) {
            ops.push(AugmentOp::Shift(dy, dx));
        }
        ops
    }

    pub fn seg(&mut self, s: &SegSample) -> SegSample {
        self.ops().into_iter().fold(s.clone(), |acc, op| augment_seg(&acc, op))
    }

    pub fn cls(&mut self, s: &ClsSample) -> ClsSample {
        let mut out = s.clone();
        for op in self.ops() {
            let op = match (op, out.bbox) {
                (AugmentOp::Shift(dy, dx), Some(b)) => {
                    let (h, w) = (out.image.shape().h as i32, out.image.shape().w as i32);
                    let dy = dy.clamp(-(b.y0 as i32), h - 1 - b.y1 as i32);
                    let dx = dx.clamp(-(b.x0 as i32), w - 1 - b.x1 as i32);
                    AugmentOp::Shift(dy, dx)
                }
                (op, _) => op,
            };
            out = augment_cls(&out, op).expect("op kept in frame");
        }
        out
    }
}
