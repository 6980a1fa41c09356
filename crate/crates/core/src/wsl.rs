//! Weakly supervised localization from attention maps.
//!
//! The pipeline blurs each map, keeps activations above a quantile threshold,
//! labels 4-connected components, picks the finest-scale component that the
//! other scales agree on, and returns its tight box. No gradients are needed.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(invalid("bounding_box", format!("({x0},{y0},{x1},{y1}) is not ordered")));
        }
        Ok(BoundingBox { x0, y0, x1, y1 })
    }

    pub fn point(y: usize, x: usize) -> Self {
        BoundingBox { x0: x, y0: y, x1: x, y1: y }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.y1 < h && self.x1 < w
    }

    pub fn include(&mut self, y: usize, x: usize) {
        self.x0 = self.x0.min(x);
        self.y0 = self.y0.min(y);
        self.x1 = self.x1.max(x);
        self.y1 = self.y1.max(y);
    }

    pub fn intersection(&self, o: &BoundingBox) -> usize {
        let w = (self.x1.min(o.x1) + 1).saturating_sub(self.x0.max(o.x0));
        let h = (self.y1.min(o.y1) + 1).saturating_sub(self.y0.max(o.y0));
        w * h
    }

    pub fn iou(&self, o: &BoundingBox) -> f64 {
        let i = self.intersection(o);
        i as f64 / (self.area() + o.area() - i) as f64
    }

    /// Tight box around the set pixels of a row-major mask.
    pub fn of_mask(mask: &[bool], h: usize, w: usize) -> Option<BoundingBox> {
        let mut found: Option<BoundingBox> = None;
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    match &mut found {
                        Some(b) => b.include(y, x),
                        None => found = Some(BoundingBox::point(y, x)),
                    }
                }
            }
        }
        found
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Label in the companion label map (≥ 1).
    pub label: usize,
    pub area: usize,
    pub bbox: BoundingBox,
}

/// 4-connected labelling: `labels[i]` is 0 for background and the component's
/// label otherwise. Components are numbered in row-major order of first pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub labels: Vec<usize>,
    pub components: Vec<Component>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Two-pass union-find labelling with 4-connectivity.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Components {
    assert_eq!(mask.len(), h * w, "mask size");
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            for j in [(x > 0).then(|| i - 1), (y > 0).then(|| i - w)].into_iter().flatten() {
                if mask[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = vec![0; h * w];
    let mut root_label = vec![0usize; h * w];
    let mut components: Vec<Component> = Vec::new();
    for i in 0..h * w {
        if !mask[i] {
            continue;
        }
        let r = find(&mut parent, i);
        if root_label[r] == 0 {
            components.push(Component {
                label: components.len() + 1,
                area: 0,
                bbox: BoundingBox::point(i / w, i % w),
            });
            root_label[r] = components.len();
        }
        let l = root_label[r];
        labels[i] = l;
        let c = &mut components[l - 1];
        c.area += 1;
        c.bbox.include(i / w, i % w);
    }
    Components { labels, components }
}

/// Separable Gaussian blur with a kernel truncated at `3σ` and edge replication.
/// `σ = 0` returns the input unchanged.
pub fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * data[y * w + clamp(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[clamp(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Linear-interpolated quantile, `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// The finest component with the most pixels active at every scale.
    Overlap,
    /// No component overlapped across scales; the largest finest component was used.
    LargestFinest,
    /// Nothing survived thresholding; a 1×1 box at the global maximum was returned.
    ArgmaxFallback,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub bbox: BoundingBox,
    /// Pixel count of the selected region.
    pub area: usize,
    pub selection: Selection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizeConfig {
    /// Quantile of each blurred map below which activations are dropped.
    pub tau: f64,
    /// Blur standard deviation in pixels at image resolution.
    pub blur: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig { tau: 0.9, blur: 1.0 }
    }
}

/// Localizes from single-channel maps (`(1, 1, h, w)` each, any resolution not
/// exceeding the image). The map with the most native pixels is the finest.
pub fn localize(maps: &[Tensor], h: usize, w: usize, cfg: &LocalizeConfig) -> Result<Localization> {
    if maps.is_empty() {
        return Err(invalid("localize", "need at least one attention map"));
    }
    if !(0.0..=1.0).contains(&cfg.tau) || cfg.blur.is_nan() || cfg.blur < 0.0 {
        return Err(invalid("localize", format!("tau {} / blur {} out of range", cfg.tau, cfg.blur)));
    }
    let mut fine = 0;
    let mut masks = Vec::with_capacity(maps.len());
    let mut blurred_fine = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        let s = m.shape();
        if s.n != 1 || s.c != 1 {
            return Err(invalid("localize", format!("expected a single-channel map, got {s}")));
        }
        if s.plane() > maps[fine].shape().plane() {
            fine = i;
        }
        let up = m.upsample_bilinear(h, w)?;
        let b = gaussian_blur(up.data(), h, w, cfg.blur);
        let t = quantile(&b, cfg.tau);
        masks.push(b.iter().map(|&v| v > t).collect::<Vec<bool>>());
        blurred_fine.push(b);
    }
    let blurred = &blurred_fine[fine];
    let cc = connected_components(&masks[fine], h, w);
    if cc.components.is_empty() {
        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
        for (i, &v) in blurred.iter().enumerate() {
            if v > best {
                best = v;
                at = i;
            }
        }
        return Ok(Localization {
            bbox: BoundingBox::point(at / w, at % w),
            area: 1,
            selection: Selection::ArgmaxFallback,
        });
    }
    let mut overlap = vec![0usize; cc.components.len()];
    for i in 0..h * w {
        let l = cc.labels[i];
        if l > 0 && masks.iter().all(|m| m[i]) {
            overlap[l - 1] += 1;
        }
    }
    let key = |c: &Component| (overlap[c.label - 1], c.area, std::cmp::Reverse(c.label));
    let best = cc.components.iter().max_by_key(|c| key(c)).expect("non-empty");
    let selection = if overlap[best.label - 1] > 0 {
        Selection::Overlap
    } else {
        Selection::LargestFinest
    };
    Ok(Localization {
        bbox: best.bbox,
        area: best.area,
        selection,
    })
}

/// Localization quality for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    pub count: usize,
    pub mean_iou: f64,
    /// Fraction with IoU > 0.5.
    pub correctness: f64,
    /// Fraction with IoU > 0.5 × (best IoU within the class).
    pub relative_correctness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WslScore {
    pub ious: Vec<f64>,
    pub mean_iou: f64,
    pub correctness: f64,
    /// One entry per class in `0..n_classes`; `None` when the class has no samples.
    pub per_class: Vec<Option<ClassScore>>,
}

pub fn wsl_score(pred: &[BoundingBox], gt: &[BoundingBox], classes: &[usize], n_classes: usize) -> Result<WslScore> {
    if pred.len() != gt.len() || gt.len() != classes.len() {
        return Err(invalid("wsl_score", "predictions, ground truths and classes differ in count"));
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let frac = |v: &[f64], thr: f64| v.iter().filter(|&&x| x > thr).count() as f64 / v.len() as f64;
    let per_class = (0..n_classes)
        .map(|c| {
            let v: Vec<f64> = ious.iter().zip(classes).filter(|(_, &k)| k == c).map(|(i, _)| *i).collect();
            (!v.is_empty()).then(|| {
                let max = v.iter().cloned().fold(0.0, f64::max);
                ClassScore {
                    class: c,
                    count: v.len(),
                    mean_iou: v.iter().sum::<f64>() / v.len() as f64,
                    correctness: frac(&v, 0.5),
                    relative_correctness: frac(&v, 0.5 * max),
                }
            })
        })
        .collect();
    let n = ious.len().max(1) as f64;
    Ok(WslScore {
        mean_iou: ious.iter().sum::<f64>() / n,
        correctness: if ious.is_empty() { 0.0 } else { frac(&ious, 0.5) },
        ious,
        per_class,
    })
}
