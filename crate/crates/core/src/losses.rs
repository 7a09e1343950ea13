//! Training objective: focal objectness with soft negatives, two-stage
//! localization and per-category binary cross-entropy.

use crate::autodiff::{Tensor, Var};
use crate::geometry::GghlBox;
use crate::label_assign::{AssignmentMap, Tag};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub loss_obj: f64,
    pub loss_loc: f64,
    pub loss_cls: f64,
    pub loss_total: f64,
    pub m_pos: usize,
    pub m_neg: usize,
    pub m_sneg: usize,
}

impl LossReport {
    pub const HEADER: &'static str = "iter\tloss_total\tloss_obj\tloss_loc\tloss_cls\tm_pos\tm_neg\tm_sneg";

    pub fn new(loss_obj: f64, loss_loc: f64, loss_cls: f64, counts: (usize, usize, usize)) -> Self {
        Self {
            loss_obj,
            loss_loc,
            loss_cls,
            loss_total: loss_obj + loss_loc + loss_cls,
            m_pos: counts.0,
            m_neg: counts.1,
            m_sneg: counts.2,
        }
    }

    /// One tab-separated metrics line. Floats use the shortest round-trip form.
    pub fn line(&self, iter: usize) -> String {
        format!(
            "{iter}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.loss_total, self.loss_obj, self.loss_loc, self.loss_cls, self.m_pos, self.m_neg, self.m_sneg
        )
    }
}

/// Supervision for one positive position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocTarget {
    pub gt: GghlBox,
    pub a: f64,
}

fn zero<'t>(like: Var<'t>) -> Var<'t> {
    like.tape().constant(Tensor::scalar(0.0))
}

fn column(rows: usize, width: usize, c: usize) -> Vec<usize> {
    (0..rows).map(|r| r * width + c).collect()
}

/// Objectness over every level of one image. Positives are pulled towards
/// their (detached) localization score with a focal factor, negatives and
/// weighted soft negatives towards 0; each group is normalized by its size.
pub fn objectness_loss<'t>(levels: &[(&AssignmentMap, Var<'t>)], gamma: f64) -> (Var<'t>, (usize, usize, usize)) {
    assert!(!levels.is_empty());
    let tape = levels[0].1.tape();
    let mut parts: [Vec<Var<'t>>; 3] = Default::default();
    let mut counts = [0usize; 3];
    for (map, obj) in levels {
        assert_eq!(obj.len(), map.len(), "objectness map does not match assignment grid");
        let pos = map.positions(Tag::Positive);
        let neg = map.positions(Tag::Negative);
        let sneg = map.positions(Tag::SoftNegative);
        counts[0] += pos.len();
        counts[1] += neg.len();
        counts[2] += sneg.len();
        if !pos.is_empty() {
            let o = obj.gather(&pos);
            let target = tape.constant(Tensor::vector(pos.iter().map(|&p| map.l[p]).collect()));
            let focal = target.sub(o).abs_pow(gamma);
            parts[0].push(focal.mul(o.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()).sum());
        }
        if !neg.is_empty() {
            let o = obj.gather(&neg);
            parts[1].push(o.abs_pow(gamma).mul(o.clamp(PROB_EPS, 1.0 - PROB_EPS).one_minus().ln()).sum());
        }
        if !sneg.is_empty() {
            let o = obj.gather(&sneg);
            let w = tape.constant(Tensor::vector(sneg.iter().map(|&p| map.w[p]).collect()));
            parts[2].push(w.mul(o.abs_pow(gamma)).mul(o.clamp(PROB_EPS, 1.0 - PROB_EPS).one_minus().ln()).sum());
        }
    }
    let mut total = zero(levels[0].1);
    for (group, &m) in parts.iter().zip(&counts) {
        if m == 0 {
            continue;
        }
        let s = group.iter().copied().reduce(|a, b| a.add(b)).expect("non-empty group");
        total = total.sub(s.mul_scalar(1.0 / m as f64));
    }
    (total, (counts[0], counts[1], counts[2]))
}

/// Per-row localization loss `1 - GIoU + MSE(s) + (a - a_gt)^2` for rows of
/// `l` and `s` (`P x 4`) and `a` (`P`). Predicted and target boxes share the
/// anchor, so their HBBs always intersect.
pub fn loc_loss_rows<'t>(l: Var<'t>, s: Var<'t>, a: Var<'t>, targets: &[LocTarget]) -> Var<'t> {
    let rows = targets.len();
    assert!(l.len() == rows * 4 && s.len() == rows * 4 && a.len() == rows);
    let tape = l.tape();
    let gl: Vec<f64> = targets.iter().flat_map(|t| t.gt.l).collect();
    let gs: Vec<f64> = targets.iter().flat_map(|t| t.gt.s).collect();
    let col = |v: Var<'t>, c: usize| v.gather(&column(rows, 4, c));
    let gcol = |c: usize| tape.constant(Tensor::vector((0..rows).map(|r| gl[r * 4 + c]).collect()));
    let (p1, p2, p3, p4) = (col(l, 0), col(l, 1), col(l, 2), col(l, 3));
    let (g1, g2, g3, g4) = (gcol(0), gcol(1), gcol(2), gcol(3));

    let inter = p2.minimum(g2).add(p4.minimum(g4)).mul(p1.minimum(g1).add(p3.minimum(g3)));
    let area_p = p2.add(p4).mul(p1.add(p3));
    let area_g = g2.add(g4).mul(g1.add(g3));
    let union = area_p.add(area_g).sub(inter);
    let enclose = p2.maximum(g2).add(p4.maximum(g4)).mul(p1.maximum(g1).add(p3.maximum(g3)));
    let giou = inter.div(union).sub(enclose.sub(union).div(enclose));

    let inv_side: Vec<f64> = targets
        .iter()
        .flat_map(|t| {
            let (h, v) = (t.gt.l[1] + t.gt.l[3], t.gt.l[0] + t.gt.l[2]);
            [1.0 / h, 1.0 / v, 1.0 / h, 1.0 / v]
        })
        .collect();
    let ds = s.reshape(vec![rows * 4]).sub(tape.constant(Tensor::vector(gs))).mul(tape.constant(Tensor::vector(inv_side)));
    let sq = ds.square();
    let mse = (0..4).map(|c| sq.gather(&column(rows, 4, c))).reduce(|x, y| x.add(y)).unwrap().mul_scalar(0.25);

    let ga = tape.constant(Tensor::vector(targets.iter().map(|t| t.a).collect()));
    let da = a.reshape(vec![rows]).sub(ga).square();
    giou.one_minus().add(mse).add(da)
}

/// Mean over positives of the initial-stage plus refined-stage row losses.
pub fn localization_loss<'t>(initial_rows: Var<'t>, refined_rows: Var<'t>) -> Var<'t> {
    assert_eq!(initial_rows.len(), refined_rows.len());
    if initial_rows.is_empty() {
        return zero(initial_rows);
    }
    initial_rows.add(refined_rows).mean()
}

/// Mean over positives of the summed per-category binary cross-entropy.
/// `probs` is `P x num_classes`.
pub fn classification_loss<'t>(probs: Var<'t>, classes: &[usize], num_classes: usize) -> Var<'t> {
    let rows = classes.len();
    assert_eq!(probs.len(), rows * num_classes);
    if rows == 0 {
        return zero(probs);
    }
    let mut onehot = vec![0.0; rows * num_classes];
    for (r, &c) in classes.iter().enumerate() {
        assert!(c < num_classes, "class {c} out of range");
        onehot[r * num_classes + c] = 1.0;
    }
    let y = probs.tape().constant(Tensor::vector(onehot));
    let p = probs.reshape(vec![rows * num_classes]).clamp(PROB_EPS, 1.0 - PROB_EPS);
    let bce = y.mul(p.ln()).add(y.one_minus().mul(p.one_minus().ln()));
    bce.sum().mul_scalar(-1.0 / rows as f64)
}

/// `obj + loc + cls` with the matching report.
pub fn total_loss<'t>(obj: Var<'t>, loc: Var<'t>, cls: Var<'t>, counts: (usize, usize, usize)) -> (Var<'t>, LossReport) {
    let total = obj.add(loc).add(cls);
    let report = LossReport::new(obj.item(), loc.item(), cls.item(), counts);
    (total, report)
}
