//! Localization-branch sampling: sliding points on the OBB boundary, spatial
//! coordinate embedding, the LS-Conv evaluation and multiplicative refinement.

use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::geometry::{GghlBox, Point};
use crate::sampling::{plan_conv, AffineCoords, GridFrame, PlanCoords, TapLayout};

/// Kernel taps whose sampling point slides along an OBB edge.
pub const SLIDING_TAPS: [usize; 4] = [0, 2, 6, 8];

/// Below this the edge-line slope is treated as vertical.
const VERTICAL_EPS: f64 = 1e-12;

/// Sampling geometry of one positive position, pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LocSamplePlan {
    pub points: [Point; 9],
    pub modulation: [f64; 9],
    pub sigma: [f64; 4],
}

impl LocSamplePlan {
    pub fn with_modulation(mut self, m: [f64; 9]) -> Self {
        self.modulation = m;
        self
    }
}

/// The OBB edge `(a, b)` (key-point indices) that sliding point `k` travels along.
pub fn sliding_segment(k: usize) -> (usize, usize) {
    match k {
        0 => (1, 3),
        1 => (1, 5),
        2 => (3, 7),
        3 => (5, 7),
        _ => panic!("sliding point index {k} out of range"),
    }
}

/// Appends the column and row index channels.
pub fn embed_coords(grid: &Tensor) -> Tensor {
    let (w, h, c) = (grid.width(), grid.height(), grid.channels());
    Tensor::grid_from_fn(w, h, c + 2, |x, y, ch| match ch.cmp(&c) {
        std::cmp::Ordering::Less => grid.at(x, y, ch),
        std::cmp::Ordering::Equal => x as f64,
        std::cmp::Ordering::Greater => y as f64,
    })
}

/// Differentiable [`embed_coords`]; the index channels are constants.
pub fn embed_coords_var(grid: Var<'_>) -> Var<'_> {
    let s = grid.shape();
    let idx = Tensor::grid_from_fn(s[1], s[0], 2, |x, y, ch| if ch == 0 { x as f64 } else { y as f64 });
    grid.concat_channels(grid.tape().constant(idx))
}

/// Sliding point `k` (tap `SLIDING_TAPS[k]`) at slide parameter `sigma`, as
/// the two-branch edge parameterization prescribes.
pub fn sliding_point(q: &[Point; 9], k: usize, sigma: f64) -> Point {
    match k {
        0 => {
            if (q[1].x - q[0].x).abs() < VERTICAL_EPS || (q[3].x - q[1].x).abs() < VERTICAL_EPS {
                Point::new(q[1].x, q[1].y + sigma * (q[3].y - q[1].y))
            } else {
                let x = q[0].x + sigma * (q[1].x - q[0].x);
                Point::new(x, q[1].y + (q[3].y - q[1].y) / (q[3].x - q[1].x) * (x - q[1].x))
            }
        }
        1 => {
            if (q[1].x - q[2].x).abs() < VERTICAL_EPS || (q[5].x - q[1].x).abs() < VERTICAL_EPS {
                Point::new(q[1].x, q[2].y + sigma * (q[5].y - q[2].y))
            } else {
                let x = q[2].x - sigma * (q[2].x - q[1].x);
                Point::new(x, q[1].y + (q[5].y - q[1].y) / (q[5].x - q[1].x) * (x - q[1].x))
            }
        }
        2 => {
            if (q[6].x - q[7].x).abs() < VERTICAL_EPS || (q[3].x - q[7].x).abs() < VERTICAL_EPS {
                Point::new(q[7].x, q[6].y - sigma * (q[7].y - q[3].y))
            } else {
                let x = q[6].x + sigma * (q[7].x - q[6].x);
                Point::new(x, q[7].y + (q[3].y - q[7].y) / (q[3].x - q[7].x) * (x - q[7].x))
            }
        }
        3 => {
            if (q[7].x - q[8].x).abs() < VERTICAL_EPS || (q[5].x - q[7].x).abs() < VERTICAL_EPS {
                Point::new(q[7].x, q[7].y - sigma * (q[7].y - q[5].y))
            } else {
                let x = q[8].x - sigma * (q[8].x - q[7].x);
                Point::new(x, q[7].y + (q[5].y - q[7].y) / (q[5].x - q[7].x) * (x - q[7].x))
            }
        }
        _ => panic!("sliding point index {k} out of range"),
    }
}

/// Sliding point `k` is affine in its slide parameter: `base + sigma * dir`.
pub fn sliding_affine(q: &[Point; 9], k: usize) -> (Point, Point) {
    let base = sliding_point(q, k, 0.0);
    let one = sliding_point(q, k, 1.0);
    (base, Point::new(one.x - base.x, one.y - base.y))
}

/// Sampling points for one position: OBB vertices, the anchor, and the four
/// sliding points. Modulation defaults to 1.
pub fn loc_sample_points(b: &GghlBox, sigma: [f64; 4]) -> LocSamplePlan {
    let q = b.key_points();
    let mut points = q;
    for (k, &tap) in SLIDING_TAPS.iter().enumerate() {
        points[tap] = sliding_point(&q, k, sigma[k]);
    }
    LocSamplePlan { points, modulation: [1.0; 9], sigma }
}

/// Multiplicative refinement of an initial box, glides clamped into their edge ranges.
pub fn refine_obb(initial: &GghlBox, delta_l: [f64; 4], delta_s: [f64; 4]) -> GghlBox {
    let l: [f64; 4] = std::array::from_fn(|n| initial.l[n] * delta_l[n]);
    let (horiz, vert) = (l[1] + l[3], l[0] + l[2]);
    let s = std::array::from_fn(|n| {
        let bound = if n % 2 == 0 { horiz } else { vert };
        (initial.s[n] * delta_s[n]).clamp(0.0, bound)
    });
    GghlBox { anchor: initial.anchor, l, s }
}

/// Differentiable [`refine_obb`] over `[P, 4]` rows of `l`, `s` and their deltas.
pub fn refine_obb_var<'t>(l: Var<'t>, s: Var<'t>, dl: Var<'t>, ds: Var<'t>) -> (Var<'t>, Var<'t>) {
    let shape = l.shape();
    let n = l.len();
    let lt = l.mul(dl).reshape(vec![n]);
    let rows = n / 4;
    let pick = |cols: [usize; 4]| -> Vec<usize> { (0..rows).flat_map(|r| cols.map(|c| r * 4 + c)).collect() };
    let bound = lt.gather(&pick([1, 0, 1, 0])).add(lt.gather(&pick([3, 2, 3, 2])));
    let zero = s.tape().constant(Tensor::zeros(vec![n]));
    let st = s.mul(ds).reshape(vec![n]).maximum(zero).minimum(bound);
    (lt.reshape(shape.clone()), st.reshape(shape))
}

/// Constant grid-unit coordinates for fixed plans.
pub fn plan_coords<'t>(tape: &'t crate::autodiff::Tape, plans: &[(usize, LocSamplePlan)], frame: GridFrame) -> PlanCoords<'t> {
    let mut data = Vec::with_capacity(plans.len() * 18);
    for (_, p) in plans {
        for pt in p.points {
            let (gx, gy) = frame.to_grid(pt);
            data.push(gx);
            data.push(gy);
        }
    }
    PlanCoords {
        positions: plans.iter().map(|(pos, _)| *pos).collect(),
        coords: tape.constant(Tensor::new(vec![plans.len(), 9, 2], data)),
    }
}

/// Grid-unit plan coordinates that stay differentiable in the slide
/// parameters. `sigma` holds 4 values per grid position (`[h, w, 4]`); the
/// boxes themselves are constants.
pub fn sigma_plan_coords<'t>(boxes: &[(usize, GghlBox)], sigma: Var<'t>, frame: GridFrame) -> PlanCoords<'t> {
    let mut affine = AffineCoords::new();
    let none = (0, 0.0);
    for (pos, b) in boxes {
        let q = b.key_points();
        for (tap, key) in q.iter().enumerate() {
            match SLIDING_TAPS.iter().position(|&t| t == tap) {
                Some(k) => {
                    let (base, dir) = sliding_affine(&q, k);
                    let (gx, gy) = frame.to_grid(base);
                    let i = pos * 4 + k;
                    affine.push(gx, (i, dir.x / frame.stride), none);
                    affine.push(gy, (i, dir.y / frame.stride), none);
                }
                None => {
                    let (gx, gy) = frame.to_grid(*key);
                    affine.push(gx, none, none);
                    affine.push(gy, none, none);
                }
            }
        }
    }
    PlanCoords {
        positions: boxes.iter().map(|(pos, _)| *pos).collect(),
        coords: affine.build(sigma).reshape(vec![boxes.len(), 9, 2]),
    }
}

/// LS-Conv over an embedded grid. Positions in `positives` sample at their
/// plan points; all others use the plain 3x3 offsets. The same modulation
/// applies to both cases.
pub fn ls_conv_forward<'t>(
    sce: Var<'t>,
    kernel: Var<'t>,
    modulation: Option<Var<'t>>,
    plan: &PlanCoords<'t>,
    positives: &[usize],
) -> Result<Var<'t>, AutodiffError> {
    check_plan_positions(&plan.positions, positives)?;
    plan_conv(sce, kernel, TapLayout::Square, Some(plan), modulation)
}

pub(crate) fn check_plan_positions(plan: &[usize], positives: &[usize]) -> Result<(), AutodiffError> {
    let mut a = plan.to_vec();
    let mut b = positives.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a.windows(2).any(|w| w[0] == w[1]) {
        return Err(AutodiffError::Contract("duplicate plan position".into()));
    }
    if let Some(p) = a.iter().find(|p| b.binary_search(p).is_err()) {
        return Err(AutodiffError::Contract(format!("plan at non-positive position {p}")));
    }
    if let Some(p) = b.iter().find(|p| a.binary_search(p).is_err()) {
        return Err(AutodiffError::Contract(format!("positive position {p} has no plan")));
    }
    Ok(())
}
