//! Gaussian heatmap priors and the two label assigners: the static
//! threshold rule and the dynamic top-P rule with soft negatives.

use std::fmt::Write as _;

use crate::geometry::{giou_hbb, GghlBox, MERect, Point};
use crate::sampling::GridFrame;

pub const DEFAULT_T: f64 = 0.3;
pub const DEFAULT_THETA: f64 = 0.3;
pub const DEFAULT_GAMMA: f64 = 2.0;

/// Positions with a heatmap score above this belong to the Gaussian region.
pub const SUPPORT_FLOOR: f64 = 1e-3;

/// Unnormalized Gaussian score of `p` for the rectangle `r`: 1 at the
/// center, `exp(-1/2)` half a side away along either principal axis.
pub fn gaussian_value(r: &MERect, p: Point) -> f64 {
    let (s, c) = r.angle.sin_cos();
    let (dx, dy) = (p.x - r.center.x, p.y - r.center.y);
    // coordinates in the rectangle frame: Q^T d
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    let (a, b) = (r.long / 2.0, r.short / 2.0);
    (-0.5 * (u * u / (a * a) + v * v / (b * b))).exp()
}

#[derive(Debug, Clone)]
pub struct GaussianField {
    pub frame: GridFrame,
    pub merect: MERect,
    pub values: Vec<f64>,
}

impl GaussianField {
    pub fn in_support(&self, pos: usize) -> bool {
        self.values[pos] > SUPPORT_FLOOR
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&p| self.in_support(p)).collect()
    }
}

/// Heatmap sampled at every cell center of a level.
pub fn gaussian_field(merect: &MERect, frame: GridFrame) -> GaussianField {
    let values = (0..frame.len()).map(|p| gaussian_value(merect, frame.cell_center(p))).collect();
    GaussianField { frame, merect: *merect, values }
}

/// Squared glide error, each glide normalized by the HBB side it runs along.
pub fn glide_mse(gt: &GghlBox, pred_s: &[f64; 4]) -> f64 {
    let (horiz, vert) = (gt.l[1] + gt.l[3], gt.l[0] + gt.l[2]);
    (0..4)
        .map(|n| {
            let side = if n % 2 == 0 { horiz } else { vert };
            ((pred_s[n] - gt.s[n]) / side).powi(2)
        })
        .sum::<f64>()
        / 4.0
}

/// Localization loss `1 - GIoU + MSE(s) + (a - a_gt)^2` between a prediction
/// and the target at the same anchor, and its score `L = exp(-loss)`.
pub fn loc_score(pred: &GghlBox, pred_a: f64, gt: &GghlBox, gt_a: f64) -> (f64, f64) {
    let loss = 1.0 - giou_hbb(&pred.hbb(), &gt.hbb()) + glide_mse(gt, &pred.s) + (pred_a - gt_a).powi(2);
    ((-loss).exp(), loss)
}

/// The schedule weight that starts at `theta` and decays linearly to 0.
pub fn scheduled_theta(iter: usize, iter_max: usize, theta: f64) -> f64 {
    if iter_max == 0 {
        return 0.0;
    }
    let it = iter.min(iter_max) as f64;
    (iter_max as f64 - it) / iter_max as f64 * theta
}

/// Combined prior/task score of a position inside the Gaussian region.
pub fn combined_score(f: f64, l: f64, c_hat: f64, iter: usize, iter_max: usize, theta: f64) -> f64 {
    let t = scheduled_theta(iter, iter_max, theta);
    t * f + (1.0 - t) * (l * c_hat).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Positive,
    Negative,
    SoftNegative,
    Ignored,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Positive => "positive",
            Tag::Negative => "negative",
            Tag::SoftNegative => "soft_negative",
            Tag::Ignored => "ignored",
        }
    }
}

/// Per-object inputs to an assigner over one level's grid.
#[derive(Debug, Clone)]
pub struct ObjectScores {
    /// Prior heatmap score per position.
    pub f: Vec<f64>,
    /// Localization score `exp(-loss)` per position (0 where not encodable).
    pub l: Vec<f64>,
    /// Predicted probability of the object's class per position.
    pub c: Vec<f64>,
    /// Whether the object's box can be encoded relative to the position.
    pub eligible: Vec<bool>,
}

impl ObjectScores {
    /// Scores with `L = C = 1` and every position eligible.
    pub fn from_field(field: &GaussianField) -> Self {
        let n = field.values.len();
        Self { f: field.values.clone(), l: vec![1.0; n], c: vec![1.0; n], eligible: vec![true; n] }
    }

    fn in_support(&self, pos: usize) -> bool {
        self.f[pos] > SUPPORT_FLOOR
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignParams {
    pub t: f64,
    pub theta: f64,
    pub iter: usize,
    pub iter_max: usize,
}

impl Default for AssignParams {
    fn default() -> Self {
        Self { t: DEFAULT_T, theta: DEFAULT_THETA, iter: 0, iter_max: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct AssignmentMap {
    pub width: usize,
    pub height: usize,
    pub tags: Vec<Tag>,
    /// Object each position was considered for, if it lies in some Gaussian region.
    pub owner: Vec<Option<usize>>,
    pub f: Vec<f64>,
    pub l: Vec<f64>,
    pub d: Vec<f64>,
    pub w: Vec<f64>,
    /// Top-P budget per object (static assignment reports its positive count).
    pub p: Vec<usize>,
}

impl AssignmentMap {
    fn empty(width: usize, height: usize, objects: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            tags: vec![Tag::Negative; n],
            owner: vec![None; n],
            f: vec![0.0; n],
            l: vec![0.0; n],
            d: vec![0.0; n],
            w: vec![0.0; n],
            p: vec![0; objects],
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn positions(&self, tag: Tag) -> Vec<usize> {
        (0..self.tags.len()).filter(|&p| self.tags[p] == tag).collect()
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Positive positions of object `obj`.
    pub fn positives_of(&self, obj: usize) -> Vec<usize> {
        (0..self.tags.len()).filter(|&p| self.tags[p] == Tag::Positive && self.owner[p] == Some(obj)).collect()
    }

    /// `x,y,tag,F,L,D,w` rows, one per position, row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,tag,F,L,D,w\n");
        for p in 0..self.tags.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p % self.width,
                p / self.width,
                self.tags[p].as_str(),
                self.f[p],
                self.l[p],
                self.d[p],
                self.w[p]
            );
        }
        out
    }
}

/// Each position goes to the object maximizing `key` among those whose
/// Gaussian region contains it.
fn owners(objects: &[ObjectScores], n: usize, key: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    (0..n)
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (o, obj) in objects.iter().enumerate() {
                if !obj.in_support(p) {
                    continue;
                }
                let k = key(o, p);
                if best.is_none_or(|(_, b)| k > b) {
                    best = Some((o, k));
                }
            }
            best.map(|(o, _)| o)
        })
        .collect()
}

fn check_sizes(objects: &[ObjectScores], n: usize) {
    for o in objects {
        assert!(
            o.f.len() == n && o.l.len() == n && o.c.len() == n && o.eligible.len() == n,
            "object score maps must cover the {n}-position grid"
        );
    }
}

/// Dynamic assignment: per object, the Top-P eligible candidates with
/// `F > T` ranked by the combined score are positive and the remaining
/// candidates ignored; low-prior positions with `D < T` become weighted
/// soft negatives; positions outside every Gaussian region are negative.
pub fn assign_dtla(objects: &[ObjectScores], width: usize, height: usize, prm: AssignParams) -> AssignmentMap {
    let n = width * height;
    check_sizes(objects, n);
    let mut map = AssignmentMap::empty(width, height, objects.len());
    let d_of = |o: usize, p: usize| {
        let obj = &objects[o];
        if obj.in_support(p) {
            combined_score(obj.f[p], obj.l[p], obj.c[p], prm.iter, prm.iter_max, prm.theta)
        } else {
            0.0
        }
    };
    map.owner = owners(objects, n, d_of);
    for p in 0..n {
        if let Some(o) = map.owner[p] {
            map.f[p] = objects[o].f[p];
            map.l[p] = objects[o].l[p];
            map.d[p] = d_of(o, p);
            map.tags[p] = Tag::Ignored;
        }
    }
    for (o, obj) in objects.iter().enumerate() {
        let mass: f64 = (0..n).filter(|&p| obj.in_support(p)).map(|p| obj.l[p]).sum();
        let budget = (mass.ceil() as usize).max(1);
        map.p[o] = budget;
        let mut cand: Vec<usize> = (0..n)
            .filter(|&p| map.owner[p] == Some(o) && obj.f[p] > prm.t && obj.eligible[p])
            .collect();
        cand.sort_by(|&a, &b| {
            map.d[b]
                .total_cmp(&map.d[a])
                .then(obj.f[b].total_cmp(&obj.f[a]))
                .then(a.cmp(&b))
        });
        for &p in cand.iter().take(budget) {
            map.tags[p] = Tag::Positive;
        }
        for p in 0..n {
            if map.owner[p] == Some(o) && obj.f[p] <= prm.t && map.d[p] < prm.t {
                map.tags[p] = Tag::SoftNegative;
                map.w[p] = 1.0 - map.d[p];
            }
        }
    }
    map
}

/// Static assignment: eligible positions with `F > T` are positive, every
/// other position is negative. Overlaps go to the object with larger `F`.
pub fn assign_gghl_static(objects: &[ObjectScores], width: usize, height: usize, t: f64) -> AssignmentMap {
    let n = width * height;
    check_sizes(objects, n);
    let mut map = AssignmentMap::empty(width, height, objects.len());
    map.owner = owners(objects, n, |o, p| objects[o].f[p]);
    for p in 0..n {
        let Some(o) = map.owner[p] else { continue };
        let obj = &objects[o];
        map.f[p] = obj.f[p];
        map.l[p] = obj.l[p];
        map.d[p] = obj.f[p];
        if obj.f[p] > t {
            if obj.eligible[p] {
                map.tags[p] = Tag::Positive;
                map.p[o] += 1;
            } else {
                map.tags[p] = Tag::Ignored;
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(f: Vec<f64>, l: Vec<f64>) -> ObjectScores {
        let n = f.len();
        ObjectScores { f, l, c: vec![1.0; n], eligible: vec![true; n] }
    }

    #[test]
    fn field_center_and_axis() {
        let r = MERect::new(Point::new(20.0, 12.0), 10.0, 4.0, 0.0);
        assert_eq!(gaussian_value(&r, r.center), 1.0);
        let v = gaussian_value(&r, Point::new(25.0, 12.0));
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        let v = gaussian_value(&r, Point::new(20.0, 14.0));
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn field_peak_cell() {
        let frame = GridFrame::new(8, 8, 8.0);
        let r = MERect::new(frame.cell_center(8 * 3 + 5), 20.0, 10.0, 0.6);
        let g = gaussian_field(&r, frame);
        assert_eq!(g.values[8 * 3 + 5], 1.0);
        assert!(g.values.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn loc_score_cases() {
        let gt = GghlBox::new(Point::new(2.0, 2.0), [2.0; 4], [0.0; 4]);
        let (l, loss) = loc_score(&gt, 1.0, &gt, 1.0);
        assert_eq!((l, loss), (1.0, 0.0));
        let pred = GghlBox::new(Point::new(2.0, 2.0), [2.0; 4], [2.0; 4]);
        let (l, loss) = loc_score(&pred, 0.9, &gt, 1.0);
        assert!((loss - 0.26).abs() < 1e-12);
        assert!((l - (-0.26f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn combined_score_schedule() {
        assert_eq!(combined_score(0.9, 0.64, 1.0, 10, 10, 0.3), 0.8);
        let d = combined_score(1.0, 0.25, 1.0, 0, 10, 0.3);
        assert!((d - (0.3 + 0.7 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn single_candidate_with_full_score() {
        let obj = single(vec![0.9, 0.1, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]);
        let m = assign_dtla(&[obj], 4, 1, AssignParams::default());
        assert_eq!(m.p[0], 1);
        assert_eq!(m.tags, vec![Tag::Positive, Tag::SoftNegative, Tag::Negative, Tag::Negative]);
        assert_eq!(m.w[1], 1.0 - m.d[1]);
    }

    #[test]
    fn tiny_scores_still_give_one_positive() {
        let obj = single(vec![0.5, 0.9, 0.6, 0.4], vec![1e-6; 4]);
        let m = assign_dtla(&[obj], 2, 2, AssignParams::default());
        assert_eq!(m.p[0], 1);
        assert_eq!(m.count(Tag::Positive), 1);
        // the rest of the high-prior candidates are ignored, never negative
        assert_eq!(m.count(Tag::Ignored), 3);
        assert_eq!(m.count(Tag::Negative), 0);
    }

    #[test]
    fn static_threshold() {
        let obj = single(vec![0.9, 0.5, 0.31, 0.3, 0.1, 0.0], vec![1.0; 6]);
        let m = assign_gghl_static(&[obj], 6, 1, 0.3);
        assert_eq!(m.count(Tag::Positive), 3);
        assert_eq!(m.count(Tag::Negative), 3);
        let m = assign_gghl_static(&[], 3, 3, 0.3);
        assert_eq!(m.count(Tag::Negative), 9);
    }

    #[test]
    fn overlap_goes_to_larger_score() {
        let a = single(vec![0.9, 0.6, 0.2], vec![1.0; 3]);
        let b = single(vec![0.1, 0.8, 0.9], vec![1.0; 3]);
        let m = assign_gghl_static(&[a, b], 3, 1, 0.3);
        assert_eq!(m.owner, vec![Some(0), Some(1), Some(1)]);
    }

    #[test]
    fn csv_has_row_per_position() {
        let m = assign_dtla(&[single(vec![0.9, 0.2], vec![0.5, 0.5])], 2, 1, AssignParams::default());
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,positive,0.9,0.5,"));
    }
}
