//! Segmentation and classification metrics.

/// Per-class scores. Every ratio lies in `[0, 1]`; `s2s_mm` is `None` when exactly
/// one of prediction and ground truth is empty for the class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub s2s_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
}

impl MetricsRecord {
    fn macro_of(&self, f: impl Fn(&ClassMetrics) -> f64) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.iter().map(f).sum::<f64>() / self.per_class.len() as f64
    }

    pub fn macro_precision(&self) -> f64 {
        self.macro_of(|c| c.precision)
    }

    pub fn macro_recall(&self) -> f64 {
        self.macro_of(|c| c.recall)
    }

    pub fn macro_f1(&self) -> f64 {
        self.macro_of(|c| c.f1)
    }

    pub fn macro_dsc(&self) -> f64 {
        self.macro_of(|c| c.dsc)
    }

    pub fn class(&self, c: usize) -> &ClassMetrics {
        &self.per_class[c]
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `counts[g][p]`: number of items with ground truth `g` predicted as `p`.
pub fn confusion(pred: &[usize], gt: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth lengths differ");
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        m[g][p] += 1;
    }
    m
}

/// Boundary pixels of a binary mask: foreground with at least one background
/// 4-neighbour. Pixels outside the image count as background.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn nearest(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|q| {
            let dy = p.0 as f64 - q.0 as f64;
            let dx = p.1 as f64 - q.1 as f64;
            dy * dy + dx * dx
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Symmetric mean boundary distance in millimetres: the mean, over the boundary
/// pixels of both masks, of the distance to the nearest boundary pixel of the
/// other mask. A 2D pixel-boundary stand-in for mesh surface distance.
pub fn surface_distance(a: &[bool], b: &[bool], h: usize, w: usize, spacing_mm: f64) -> Option<f64> {
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => Some(0.0),
        (false, false) => {
            let total: f64 = ba.iter().map(|&p| nearest(p, &bb)).sum::<f64>()
                + bb.iter().map(|&p| nearest(p, &ba)).sum::<f64>();
            Some(total / (ba.len() + bb.len()) as f64 * spacing_mm)
        }
        _ => None,
    }
}

/// Dense label-map metrics for an `h × w` image. A class absent from both maps
/// scores 1 on every ratio and 0 mm surface distance.
pub fn seg_metrics(pred: &[usize], gt: &[usize], h: usize, w: usize, n_classes: usize, spacing_mm: f64) -> MetricsRecord {
    assert_eq!(pred.len(), h * w, "prediction size");
    assert_eq!(gt.len(), h * w, "ground-truth size");
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let pm: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let gm: Vec<bool> = gt.iter().map(|&v| v == c).collect();
        let tp = pm.iter().zip(&gm).filter(|(p, g)| **p && **g).count();
        let np = pm.iter().filter(|&&p| p).count();
        let ng = gm.iter().filter(|&&g| g).count();
        let s2s_mm = surface_distance(&pm, &gm, h, w, spacing_mm);
        per_class.push(if np == 0 && ng == 0 {
            ClassMetrics {
                class: c,
                dsc: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                iou: 1.0,
                s2s_mm,
            }
        } else {
            let precision = ratio(tp, np);
            let recall = ratio(tp, ng);
            ClassMetrics {
                class: c,
                dsc: ratio(2 * tp, np + ng),
                precision,
                recall,
                f1: harmonic(precision, recall),
                iou: ratio(tp, np + ng - tp),
                s2s_mm,
            }
        });
    }
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    MetricsRecord {
        per_class,
        accuracy: ratio(correct, pred.len()),
    }
}

/// Per-class precision / recall / F1 with 0 for empty denominators; `dsc` equals
/// `f1` and `iou` is the per-class Jaccard index of the label sets.
pub fn cls_metrics(pred: &[usize], gt: &[usize], n_classes: usize) -> MetricsRecord {
    let m = confusion(pred, gt, n_classes);
    let per_class = (0..n_classes)
        .map(|c| {
            let tp = m[c][c];
            let predicted: usize = (0..n_classes).map(|g| m[g][c]).sum();
            let actual: usize = m[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = harmonic(precision, recall);
            ClassMetrics {
                class: c,
                dsc: f1,
                precision,
                recall,
                f1,
                iou: ratio(tp, predicted + actual - tp),
                s2s_mm: None,
            }
        })
        .collect();
    let correct: usize = (0..n_classes).map(|c| m[c][c]).sum();
    MetricsRecord {
        per_class,
        accuracy: ratio(correct, gt.len()),
    }
}

/// Aggregates per-image segmentation records by averaging each field per class.
/// Surface distances average over the images where they are defined.
pub fn mean_records(records: &[MetricsRecord]) -> Option<MetricsRecord> {
    let first = records.first()?;
    let k = records.len() as f64;
    let per_class = (0..first.per_class.len())
        .map(|c| {
            let avg = |f: &dyn Fn(&ClassMetrics) -> f64| records.iter().map(|r| f(&r.per_class[c])).sum::<f64>() / k;
            let s2s: Vec<f64> = records.iter().filter_map(|r| r.per_class[c].s2s_mm).collect();
            ClassMetrics {
                class: c,
                dsc: avg(&|m| m.dsc),
                precision: avg(&|m| m.precision),
                recall: avg(&|m| m.recall),
                f1: avg(&|m| m.f1),
                iou: avg(&|m| m.iou),
                s2s_mm: (!s2s.is_empty()).then(|| s2s.iter().sum::<f64>() / s2s.len() as f64),
            }
        })
        .collect();
    Some(MetricsRecord {
        per_class,
        accuracy: records.iter().map(|r| r.accuracy).sum::<f64>() / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks() {
        let m = vec![0, 1, 1, 2, 2, 0, 1, 0, 2];
        let r = seg_metrics(&m, &m, 3, 3, 3, 1.0);
        for c in &r.per_class {
            assert_eq!((c.dsc, c.s2s_mm), (1.0, Some(0.0)));
        }
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn half_prediction_closed_form() {
        let k = 6;
        let gt: Vec<usize> = (0..4 * 4).map(|i| usize::from(i < 2 * k)).collect();
        let pred: Vec<usize> = (0..4 * 4).map(|i| usize::from(i < k)).collect();
        let c = seg_metrics(&pred, &gt, 4, 4, 2, 1.0).per_class[1].clone();
        assert!((c.dsc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((c.precision, c.recall), (1.0, 0.5));
    }

    #[test]
    fn one_pixel_boundaries_three_apart() {
        let (h, w) = (1, 7);
        let mut a = vec![false; 7];
        let mut b = vec![false; 7];
        a[1] = true;
        b[4] = true;
        assert_eq!(surface_distance(&a, &b, h, w, 2.0), Some(6.0));
        assert_eq!(surface_distance(&a, &[false; 7], h, w, 2.0), None);
    }

    #[test]
    fn cls_closed_forms() {
        let r = cls_metrics(&[0, 1, 2], &[0, 1, 2], 3);
        assert!(r.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        // class A = 0: TP 1, FP 1, FN 0
        let r = cls_metrics(&[0, 0], &[0, 1], 2);
        let a = r.class(0);
        assert_eq!((a.precision, a.recall), (0.5, 1.0));
        assert!((a.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.class(1).precision, 0.0);
        assert_eq!(r.accuracy, 0.5);
    }
}
