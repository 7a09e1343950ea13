//! Rotated non-maximum suppression and average-precision evaluation.

use std::fmt::Write as _;

use crate::geometry::{iou_polygon, Polygon4};

pub const DEFAULT_NMS_IOU: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub polygon: Polygon4,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub polygon: Polygon4,
    pub class: usize,
    pub difficult: bool,
}

fn by_score_desc(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy class-wise suppression: keeps the best-scoring box and drops every
/// same-class box overlapping it by more than `iou_thresh`.
pub fn nms_rotated(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score_desc(dets) {
        let d = dets[i];
        if kept.iter().all(|k| k.class != d.class || iou_polygon(&k.polygon, &d.polygon) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    AllPoint,
    /// Mean of the envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub num_classes: usize,
    pub thresholds: Vec<f64>,
    pub interpolation: Interpolation,
}

impl EvalConfig {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, thresholds: coco_thresholds(), interpolation: Interpolation::AllPoint }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class: usize,
    pub num_gt: usize,
    pub num_det: usize,
    /// AP per threshold.
    pub ap: Vec<f64>,
    /// `(recall, precision)` curve per threshold.
    pub curves: Vec<(Vec<f64>, Vec<f64>)>,
    /// No ground truth and no detections: AP reported as 1.0 by convention.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassResult>,
    /// mAP per threshold over classes that have ground truth or detections.
    pub map: Vec<f64>,
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
    /// Mean IoU of true positives at the first threshold.
    pub mean_matched_iou: f64,
    /// Every class was undefined.
    pub undefined: bool,
}

impl EvalResult {
    fn at(&self, t: f64) -> f64 {
        self.thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|i| self.map[i])
            .unwrap_or(f64::NAN)
    }

    /// Per-class rows followed by a summary row, tab-separated.
    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::from("class\tgts\tdets\tAP50\tAP75\tAP50:95\n");
        for c in &self.classes {
            let name = class_names.get(c.class).cloned().unwrap_or_else(|| c.class.to_string());
            let row = self.single(&c.ap);
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}{}",
                c.num_gt,
                c.num_det,
                row.0,
                row.1,
                row.2,
                if c.undefined { "\t(undefined)" } else { "" }
            );
        }
        let _ = writeln!(
            out,
            "mAP\t-\t-\t{:.4}\t{:.4}\t{:.4}{}",
            self.map50,
            self.map75,
            self.map50_95,
            if self.undefined { "\t(undefined)" } else { "" }
        );
        out
    }

    fn single(&self, ap: &[f64]) -> (f64, f64, f64) {
        let pick = |t: f64| {
            self.thresholds
                .iter()
                .position(|&x| (x - t).abs() < 1e-9)
                .map(|i| ap[i])
                .unwrap_or(f64::NAN)
        };
        (pick(0.5), pick(0.75), ap.iter().sum::<f64>() / ap.len().max(1) as f64)
    }
}

fn average_precision(recall: &[f64], precision: &[f64], interp: Interpolation) -> f64 {
    match interp {
        Interpolation::AllPoint => {
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(rc, _)| **rc >= r - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Matches detections to ground truth per image and class in descending
/// score order. A detection whose best match is a difficult object is
/// neither a true nor a false positive; difficult objects are never misses.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], cfg: &EvalConfig) -> EvalResult {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let nt = cfg.thresholds.len();
    let mut classes = Vec::with_capacity(cfg.num_classes);
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    for class in 0..cfg.num_classes {
        let num_gt: usize = gts.iter().flatten().filter(|g| g.class == class && !g.difficult).count();
        // (score, image, det) over all images
        let mut all: Vec<(f64, usize, Detection)> = Vec::new();
        for (img, ds) in dets.iter().enumerate() {
            for d in ds.iter().filter(|d| d.class == class) {
                all.push((d.score, img, *d));
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let num_det = all.len();
        let undefined = num_gt == 0 && num_det == 0;
        let mut ap = Vec::with_capacity(nt);
        let mut curves = Vec::with_capacity(nt);
        for (ti, &thr) in cfg.thresholds.iter().enumerate() {
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let (mut tp, mut fp) = (0usize, 0usize);
            let (mut rec, mut prec) = (Vec::new(), Vec::new());
            for (_, img, d) in &all {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts[*img].iter().enumerate() {
                    if g.class != class {
                        continue;
                    }
                    let iou = iou_polygon(&d.polygon, &g.polygon);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                match best {
                    Some((gi, iou)) if iou >= thr => {
                        if gts[*img][gi].difficult {
                            continue;
                        }
                        if used[*img][gi] {
                            fp += 1;
                        } else {
                            used[*img][gi] = true;
                            tp += 1;
                            if ti == 0 {
                                iou_sum += iou;
                                iou_count += 1;
                            }
                        }
                    }
                    _ => fp += 1,
                }
                rec.push(if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 });
                prec.push(tp as f64 / (tp + fp) as f64);
            }
            ap.push(if undefined {
                1.0
            } else if num_gt == 0 {
                0.0
            } else {
                average_precision(&rec, &prec, cfg.interpolation)
            });
            curves.push((rec, prec));
        }
        classes.push(ClassResult { class, num_gt, num_det, ap, curves, undefined });
    }
    let defined: Vec<&ClassResult> = classes.iter().filter(|c| !c.undefined).collect();
    let undefined = defined.is_empty();
    let map: Vec<f64> = (0..nt)
        .map(|t| {
            if undefined {
                1.0
            } else {
                defined.iter().map(|c| c.ap[t]).sum::<f64>() / defined.len() as f64
            }
        })
        .collect();
    let map50_95 = if nt == 0 { f64::NAN } else { map.iter().sum::<f64>() / nt as f64 };
    let mut r = EvalResult {
        thresholds: cfg.thresholds.clone(),
        classes,
        map,
        map50: 0.0,
        map75: 0.0,
        map50_95,
        mean_matched_iou: if iou_count > 0 { iou_sum / iou_count as f64 } else { 0.0 },
        undefined,
    };
    r.map50 = r.at(0.5);
    r.map75 = r.at(0.75);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;

    fn rect(x1: f64, y1: f64, x2: f64, y2: f64) -> Polygon4 {
        Rect { x1, y1, x2, y2 }.to_polygon()
    }

    fn det(p: Polygon4, score: f64) -> Detection {
        Detection { polygon: p, class: 0, score }
    }

    fn gt(p: Polygon4) -> GroundTruth {
        GroundTruth { polygon: p, class: 0, difficult: false }
    }

    #[test]
    fn nms_identical_and_disjoint() {
        let a = rect(0.0, 0.0, 4.0, 4.0);
        let kept = nms_rotated(&[det(a, 0.8), det(a, 0.9)], 0.4);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let b = rect(10.0, 10.0, 12.0, 12.0);
        assert_eq!(nms_rotated(&[det(a, 0.8), det(b, 0.9)], 0.4).len(), 2);
        let mut other = det(a, 0.5);
        other.class = 1;
        assert_eq!(nms_rotated(&[det(a, 0.8), other], 0.4).len(), 2);
    }

    #[test]
    fn nms_chain() {
        // A-B and B-C overlap with IoU 3/7, A and C only touch
        let a = rect(0.0, 0.0, 2.0, 1.0);
        let b = rect(0.5, 0.0, 3.5, 1.0);
        let c = rect(2.0, 0.0, 4.0, 1.0);
        assert!((iou_polygon(&a, &b) - 3.0 / 7.0).abs() < 1e-12);
        assert!((iou_polygon(&b, &c) - 3.0 / 7.0).abs() < 1e-12);
        assert!(iou_polygon(&a, &c) < 1e-12);
        let kept = nms_rotated(&[det(a, 0.9), det(b, 0.8), det(c, 0.7)], 0.4);
        assert_eq!(kept.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.9, 0.7]);
    }

    #[test]
    fn perfect_detections() {
        let g = vec![vec![gt(rect(0.0, 0.0, 4.0, 4.0)), gt(rect(5.0, 5.0, 9.0, 8.0))]];
        let d = vec![g[0].iter().map(|g| det(g.polygon, 1.0)).collect()];
        let r = evaluate(&d, &g, &EvalConfig::new(1));
        assert_eq!((r.map50, r.map50_95), (1.0, 1.0));
        assert!((r.mean_matched_iou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_recall() {
        let g = vec![vec![gt(rect(0.0, 0.0, 4.0, 4.0)), gt(rect(5.0, 5.0, 9.0, 8.0))]];
        let d = vec![vec![det(g[0][0].polygon, 0.7)]];
        let r = evaluate(&d, &g, &EvalConfig::new(1));
        assert!((r.map50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_straddle() {
        // IoU 0.6: 3x1 strips offset by 0.75
        let a = rect(0.0, 0.0, 4.0, 1.0);
        let b = rect(1.0, 0.0, 5.0, 1.0);
        assert!((iou_polygon(&a, &b) - 0.6).abs() < 1e-12);
        let r = evaluate(&[vec![det(b, 0.9)]], &[vec![gt(a)]], &EvalConfig::new(1));
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map75, 0.0);
    }

    #[test]
    fn empty_dataset_flagged() {
        let r = evaluate(&[], &[], &EvalConfig::new(3));
        assert!(r.undefined);
        assert_eq!(r.map50, 1.0);
        assert!(r.to_text(&[]).contains("(undefined)"));
    }

    #[test]
    fn difficult_is_neither_hit_nor_miss() {
        let a = rect(0.0, 0.0, 4.0, 4.0);
        let hard = GroundTruth { polygon: rect(10.0, 0.0, 14.0, 4.0), class: 0, difficult: true };
        let r = evaluate(&[vec![det(a, 0.9), det(hard.polygon, 0.95)]], &[vec![gt(a), hard]], &EvalConfig::new(1));
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.classes[0].num_gt, 1);
    }

    #[test]
    fn eleven_point() {
        let g = vec![vec![gt(rect(0.0, 0.0, 4.0, 4.0)), gt(rect(5.0, 5.0, 9.0, 8.0))]];
        let d = vec![vec![det(g[0][0].polygon, 0.7)]];
        let cfg = EvalConfig { interpolation: Interpolation::ElevenPoint, ..EvalConfig::new(1) };
        let r = evaluate(&d, &g, &cfg);
        assert!((r.map50 - 6.0 / 11.0).abs() < 1e-12);
    }
}
