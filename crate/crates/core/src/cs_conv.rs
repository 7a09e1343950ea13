//! Classification-branch sampling inside the MERect and the dynamic circular
//! kernel (circularization, eight 45-degree rotations, square/circular fusion
//! and orientation-weighted aggregation).

use crate::autodiff::{tap_transform, AutodiffError, Tensor, Var};
use crate::geometry::{MERect, Point};
use crate::ls_conv::check_plan_positions;
use crate::sampling::{plan_conv, AffineCoords, GridFrame, PlanCoords, TapLayout};

/// Outer ring of a 3x3 kernel in clockwise order (image coordinates).
pub const RING: [usize; 8] = [0, 1, 2, 5, 8, 7, 6, 3];

pub const CORNER_SELF: f64 = 0.5;
pub const CORNER_EDGE: f64 = (std::f64::consts::SQRT_2 - 1.0) / 2.0;
pub const CORNER_CENTER: f64 = (3.0 - 2.0 * std::f64::consts::SQRT_2) / 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel3 {
    pub taps: [f64; 9],
    pub circular: bool,
}

impl Kernel3 {
    pub fn square(taps: [f64; 9]) -> Self {
        Self { taps, circular: false }
    }
}

/// The interpolation stencil of each corner as `(tap, weight)` pairs.
pub fn corner_stencils() -> [(usize, [(usize, f64); 4]); 4] {
    let (a, b, c) = (CORNER_SELF, CORNER_EDGE, CORNER_CENTER);
    [
        (0, [(0, a), (1, b), (3, b), (4, c)]),
        (2, [(1, b), (2, a), (4, c), (5, b)]),
        (6, [(3, b), (4, c), (6, a), (7, b)]),
        (8, [(4, c), (5, b), (7, b), (8, a)]),
    ]
}

/// Circularization as a 9x9 tap map (`out[j] = sum_i map[j][i] * in[i]`).
pub fn circularize_map() -> [[f64; 9]; 9] {
    let mut m = [[0.0; 9]; 9];
    for (j, row) in m.iter_mut().enumerate() {
        row[j] = 1.0;
    }
    for (corner, stencil) in corner_stencils() {
        m[corner] = [0.0; 9];
        for (i, w) in stencil {
            m[corner][i] = w;
        }
    }
    m
}

/// Clockwise rotation by `k` eighths of a turn as a 9x9 tap map.
pub fn rotation_map(k: usize) -> [[f64; 9]; 9] {
    let mut m = [[0.0; 9]; 9];
    m[4][4] = 1.0;
    for i in 0..8 {
        m[RING[(i + k) % 8]][RING[i]] = 1.0;
    }
    m
}

fn compose(a: &[[f64; 9]; 9], b: &[[f64; 9]; 9]) -> [[f64; 9]; 9] {
    std::array::from_fn(|j| std::array::from_fn(|i| (0..9).map(|t| a[j][t] * b[t][i]).sum()))
}

fn apply(map: &[[f64; 9]; 9], taps: &[f64; 9]) -> [f64; 9] {
    std::array::from_fn(|j| {
        let mut acc = 0.0;
        for i in 0..9 {
            if map[j][i] != 0.0 {
                acc += map[j][i] * taps[i];
            }
        }
        acc
    })
}

pub fn circularize(square: &Kernel3) -> Kernel3 {
    Kernel3 { taps: apply(&circularize_map(), &square.taps), circular: true }
}

/// Rotates the outer ring clockwise by `k` steps. Square kernels only admit even `k`.
pub fn rotate_kernel(kernel: &Kernel3, k: usize) -> Result<Kernel3, AutodiffError> {
    if k % 2 == 1 && !kernel.circular {
        return Err(AutodiffError::Contract(format!("odd rotation {k} of a square kernel")));
    }
    let mut taps = kernel.taps;
    for i in 0..8 {
        taps[RING[(i + k) % 8]] = kernel.taps[RING[i]];
    }
    Ok(Kernel3 { taps, circular: kernel.circular })
}

/// `lambda_j` mixing weight index for orientation `k`; `None` for odd `k`.
pub fn lambda_index(k: usize) -> Option<usize> {
    (k % 2 == 0).then_some((k % 8) / 2)
}

/// Fused kernel for orientation `k`: even orientations blend the rotated
/// circular and square kernels with `lambda[k / 2]`, odd ones keep the circular kernel.
pub fn fuse_kernels(square_rot: &Kernel3, circular_rot: &Kernel3, lambda: [f64; 4], k: usize) -> Kernel3 {
    match lambda_index(k) {
        Some(j) => {
            let l = lambda[j];
            Kernel3 {
                taps: std::array::from_fn(|t| l * circular_rot.taps[t] + (1.0 - l) * square_rot.taps[t]),
                circular: true,
            }
        }
        None => *circular_rot,
    }
}

/// Tap maps `(circular part, square part)` of orientation `k`.
pub fn orientation_maps(k: usize) -> ([[f64; 9]; 9], [[f64; 9]; 9]) {
    let r = rotation_map(k);
    (compose(&r, &circularize_map()), r)
}

/// A DCK bank over a multi-channel base kernel `[9, cin, cout]`.
#[derive(Debug, Clone)]
pub struct DckBank {
    pub base: Tensor,
    pub lambda: [f64; 4],
    pub beta: [f64; 8],
}

impl DckBank {
    pub fn circular(&self) -> Tensor {
        map_tensor(&circularize_map(), &self.base)
    }

    pub fn fused(&self, k: usize) -> Tensor {
        let (cm, sm) = orientation_maps(k);
        let c = map_tensor(&cm, &self.base);
        match lambda_index(k) {
            Some(j) => {
                let s = map_tensor(&sm, &self.base);
                let l = self.lambda[j];
                let data = c.data().iter().zip(s.data()).map(|(a, b)| l * a + (1.0 - l) * b).collect();
                Tensor::new(self.base.shape().to_vec(), data)
            }
            None => c,
        }
    }

    /// `sum_k beta_k * fused(k)`.
    pub fn effective(&self) -> Tensor {
        let mut acc = vec![0.0; self.base.len()];
        for (k, b) in self.beta.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(self.fused(k).data()) {
                *a += b * v;
            }
        }
        Tensor::new(self.base.shape().to_vec(), acc)
    }
}

fn map_tensor(map: &[[f64; 9]; 9], t: &Tensor) -> Tensor {
    let r = t.len() / 9;
    let mut out = vec![0.0; t.len()];
    for j in 0..9 {
        for i in 0..9 {
            if map[j][i] != 0.0 {
                for e in 0..r {
                    out[j * r + e] += map[j][i] * t.data()[i * r + e];
                }
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Differentiable fused kernels for all eight orientations.
pub fn dck_fused_kernels<'t>(base: Var<'t>, lambda: Var<'t>) -> Vec<Var<'t>> {
    (0..8)
        .map(|k| {
            let (cm, sm) = orientation_maps(k);
            let c = tap_transform(base, cm);
            match lambda_index(k) {
                Some(j) => {
                    let l = lambda.gather(&[j]);
                    c.scale(l).add(tap_transform(base, sm).scale(l.one_minus()))
                }
                None => c,
            }
        })
        .collect()
}

/// Differentiable `sum_k beta_k * fused_k(lambda)`. Convolution is linear in
/// the kernel and every orientation shares sampling points and modulation,
/// so this collapses the eight orientation groups into a single kernel.
pub fn dck_effective_kernel<'t>(base: Var<'t>, lambda: Var<'t>, beta: Var<'t>) -> Var<'t> {
    dck_fused_kernels(base, lambda)
        .into_iter()
        .enumerate()
        .map(|(k, f)| f.scale(beta.gather(&[k])))
        .reduce(|a, b| a.add(b))
        .expect("eight orientations")
}

/// Sampling geometry of one positive position inside its MERect, pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsSamplePlan {
    pub points: [Point; 9],
    /// Interleaved `(omega_x, omega_y)` per tap.
    pub omega: [f64; 18],
    pub modulation: [f64; 9],
}

/// Tap `i` lands at `(-S1/2 + wx*S1, -S2/2 + wy*S2)` in the rectangle frame,
/// rotated by `alpha` about the center.
pub fn cls_sample_points(r: &MERect, omega: [f64; 18]) -> ClsSamplePlan {
    let points = std::array::from_fn(|i| {
        let u = (-0.5 + omega[2 * i]) * r.long;
        let v = (-0.5 + omega[2 * i + 1]) * r.short;
        r.to_image(u, v)
    });
    ClsSamplePlan { points, omega, modulation: [1.0; 9] }
}

/// Constant grid-unit coordinates for fixed plans.
pub fn cls_plan_coords<'t>(tape: &'t crate::autodiff::Tape, plans: &[(usize, ClsSamplePlan)], frame: GridFrame) -> PlanCoords<'t> {
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

/// Grid-unit plan coordinates differentiable in `omega` (`[h, w, 18]`).
pub fn omega_plan_coords<'t>(rects: &[(usize, MERect)], omega: Var<'t>, frame: GridFrame) -> PlanCoords<'t> {
    let mut affine = AffineCoords::new();
    let st = frame.stride;
    for (pos, r) in rects {
        let (s, c) = r.angle.sin_cos();
        let origin = r.to_image(-0.5 * r.long, -0.5 * r.short);
        let (gx, gy) = frame.to_grid(origin);
        for i in 0..9 {
            let (ix, iy) = (pos * 18 + 2 * i, pos * 18 + 2 * i + 1);
            affine.push(gx, (ix, c * r.long / st), (iy, -s * r.short / st));
            affine.push(gy, (ix, s * r.long / st), (iy, c * r.short / st));
        }
    }
    PlanCoords {
        positions: rects.iter().map(|(pos, _)| *pos).collect(),
        coords: affine.build(omega).reshape(vec![rects.len(), 9, 2]),
    }
}

/// CS-Conv with an already aggregated DCK kernel. Positives sample at their
/// plan points; other positions use the circular neighbourhood.
pub fn cs_conv_forward<'t>(
    grid: Var<'t>,
    kernel: Var<'t>,
    modulation: Option<Var<'t>>,
    plan: &PlanCoords<'t>,
    positives: &[usize],
) -> Result<Var<'t>, AutodiffError> {
    check_plan_positions(&plan.positions, positives)?;
    plan_conv(grid, kernel, TapLayout::Circular, Some(plan), modulation)
}

/// Reference evaluation as eight orientation groups: `sum_k beta_k * conv(fused_k)`.
pub fn cs_conv_forward_grouped<'t>(
    grid: Var<'t>,
    base: Var<'t>,
    lambda: Var<'t>,
    beta: Var<'t>,
    modulation: Option<Var<'t>>,
    plan: &PlanCoords<'t>,
    positives: &[usize],
) -> Result<Var<'t>, AutodiffError> {
    check_plan_positions(&plan.positions, positives)?;
    let mut acc: Option<Var<'t>> = None;
    for (k, fused) in dck_fused_kernels(base, lambda).into_iter().enumerate() {
        let out = plan_conv(grid, fused, TapLayout::Circular, Some(plan), modulation)?.scale(beta.gather(&[k]));
        acc = Some(match acc {
            Some(a) => a.add(out),
            None => out,
        });
    }
    Ok(acc.expect("eight orientations"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{bilinear_sample, conv2d, Tape};

    fn taps(seed: u64) -> [f64; 9] {
        std::array::from_fn(|i| ((seed as f64 * 1.7 + i as f64 * 0.9).sin() * 3.0).round() / 2.0)
    }

    #[test]
    fn circularize_examples() {
        let ones = circularize(&Kernel3::square([1.0; 9]));
        for t in ones.taps {
            assert!((t - 1.0).abs() < 1e-12);
        }
        let mut e0 = [0.0; 9];
        e0[0] = 1.0;
        let c = circularize(&Kernel3::square(e0));
        assert_eq!(c.taps[0], 0.5);
        assert_eq!([c.taps[2], c.taps[6], c.taps[8]], [0.0; 3]);
        assert_eq!(circularize(&Kernel3::square([0.0; 9])).taps, [0.0; 9]);
    }

    #[test]
    fn edge_and_center_taps_unchanged() {
        let k = Kernel3::square(taps(3));
        let c = circularize(&k);
        for j in [1, 3, 4, 5, 7] {
            assert_eq!(c.taps[j], k.taps[j]);
        }
    }

    #[test]
    fn rotation_moves_top_to_right() {
        let mut t = [0.0; 9];
        t[1] = 1.0;
        let r = rotate_kernel(&Kernel3::square(t), 2).unwrap();
        assert_eq!(r.taps[5], 1.0);
        assert_eq!(r.taps.iter().sum::<f64>(), 1.0);
        let k = circularize(&Kernel3::square(taps(1)));
        assert_eq!(rotate_kernel(&k, 0).unwrap(), k);
        assert_eq!(rotate_kernel(&k, 8).unwrap(), k);
    }

    #[test]
    fn odd_rotation_of_square_rejected() {
        let k = Kernel3::square(taps(2));
        assert!(matches!(rotate_kernel(&k, 3), Err(AutodiffError::Contract(_))));
        assert!(rotate_kernel(&circularize(&k), 3).is_ok());
    }

    #[test]
    fn fusion_endpoints() {
        let sq = Kernel3::square(taps(4));
        let ci = circularize(&sq);
        for k in [0, 2, 4, 6] {
            let (s, c) = (rotate_kernel(&sq, k).unwrap(), rotate_kernel(&ci, k).unwrap());
            let mut lam = [0.3; 4];
            lam[k / 2] = 1.0;
            assert_eq!(fuse_kernels(&s, &c, lam, k).taps, c.taps);
            lam[k / 2] = 0.0;
            assert_eq!(fuse_kernels(&s, &c, lam, k).taps, s.taps);
        }
        let c = rotate_kernel(&ci, 3).unwrap();
        assert_eq!(fuse_kernels(&sq, &c, [0.1; 4], 3), fuse_kernels(&sq, &c, [0.9; 4], 3));
    }

    #[test]
    fn bank_matches_scalar_pipeline() {
        let t = taps(5);
        let bank = DckBank {
            base: Tensor::new(vec![9, 1, 1], t.to_vec()),
            lambda: [0.2, 0.4, 0.6, 0.8],
            beta: [0.125; 8],
        };
        let sq = Kernel3::square(t);
        let ci = circularize(&sq);
        for k in 0..8 {
            let c = rotate_kernel(&ci, k).unwrap();
            let s = if k % 2 == 0 { rotate_kernel(&sq, k).unwrap() } else { sq };
            let want = fuse_kernels(&s, &c, bank.lambda, k);
            let got = bank.fused(k);
            for j in 0..9 {
                assert!((got.data()[j] - want.taps[j]).abs() < 1e-12);
            }
        }
        let tape = Tape::new();
        let eff = dck_effective_kernel(
            tape.constant(bank.base.clone()),
            tape.constant(Tensor::vector(bank.lambda.to_vec())),
            tape.constant(Tensor::vector(bank.beta.to_vec())),
        );
        assert!(eff.value().max_abs_diff(&bank.effective()) < 1e-12);
    }

    #[test]
    fn cls_points_examples() {
        let r = MERect::new(Point::new(10.0, 20.0), 8.0, 4.0, 0.0);
        let mut om = [0.5; 18];
        assert_eq!(cls_sample_points(&r, om).points[0], Point::new(10.0, 20.0));
        om[0] = 1.0;
        assert_eq!(cls_sample_points(&r, om).points[0], Point::new(14.0, 20.0));
    }

    #[test]
    fn omega_coords_match_plan() {
        let tape = Tape::new();
        let frame = GridFrame::new(3, 3, 8.0);
        let r = MERect::new(Point::new(13.0, 11.0), 9.0, 5.0, 0.7);
        let om: Vec<f64> = (0..162).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let pc = omega_plan_coords(&[(5, r)], tape.constant(Tensor::new(vec![3, 3, 18], om.clone())), frame);
        let own: [f64; 18] = std::array::from_fn(|i| om[5 * 18 + i]);
        let want = cls_plan_coords(&tape, &[(5, cls_sample_points(&r, own))], frame);
        assert!(pc.coords.value().max_abs_diff(&want.coords.value()) < 1e-12);
    }

    #[test]
    fn one_hot_square_orientation_is_plain_conv_on_edge_taps() {
        let tape = Tape::new();
        let g = Tensor::grid_from_fn(6, 5, 2, |x, y, c| ((x * 5 + y * 3 + c * 7) % 11) as f64 * 0.3 - 1.0);
        let x = tape.constant(g.clone());
        let mut base = Tensor::new(vec![9, 2, 3], (0..54).map(|i| (i as f64 * 0.61).cos()).collect());
        let lambda = tape.constant(Tensor::vector(vec![0.0; 4]));
        let mut beta = vec![0.0; 8];
        beta[0] = 1.0;
        let beta = tape.constant(Tensor::vector(beta));
        let empty = cls_plan_coords(&tape, &[], GridFrame::new(6, 5, 8.0));

        // corner taps zeroed: only integer offsets contribute
        for j in [0, 2, 6, 8] {
            base.data_mut()[j * 6..j * 6 + 6].fill(0.0);
        }
        let bv = tape.constant(base.clone());
        let eff = dck_effective_kernel(bv, lambda, beta);
        let out = cs_conv_forward(x, eff, None, &empty, &[]).unwrap().value();
        let plain = conv2d(x, bv, None, 3, 1).value();
        assert!(out.max_abs_diff(&plain) < 1e-12);

        // a single corner tap reads the bilinear sample at the diagonal offset
        let mut corner = Tensor::zeros(vec![9, 2, 3]);
        corner.data_mut()[0..6].copy_from_slice(&base.data()[6..12]);
        let cv = tape.constant(corner.clone());
        let eff = dck_effective_kernel(cv, lambda, beta);
        let out = cs_conv_forward(x, eff, None, &empty, &[]).unwrap().value();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (px, py) = (3usize, 2usize);
        let s = bilinear_sample(x, tape.constant(Tensor::vector(vec![px as f64 - h, py as f64 - h]))).data();
        for o in 0..3 {
            let want: f64 = (0..2).map(|c| s[c] * corner.data()[c * 3 + o]).sum();
            assert!((out.at(px, py, o) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grouped_and_collapsed_agree() {
        let tape = Tape::new();
        let frame = GridFrame::new(5, 4, 8.0);
        let x = tape.constant(Tensor::grid_from_fn(5, 4, 2, |x, y, c| ((x + 2 * y + 3 * c) as f64 * 0.7).sin()));
        let base = tape.constant(Tensor::new(vec![9, 2, 2], (0..36).map(|i| (i as f64 * 0.3).cos()).collect()));
        let lambda = tape.constant(Tensor::vector(vec![0.1, 0.5, 0.7, 0.9]));
        let beta = tape.constant(Tensor::vector((0..8).map(|i| i as f64 + 1.0).collect())).softmax();
        let m = tape.constant(Tensor::new(vec![4, 5, 9], (0..180).map(|i| 0.2 + (i % 7) as f64 * 0.1).collect()));
        let r = MERect::new(Point::new(20.0, 12.0), 14.0, 6.0, 0.4);
        let om: [f64; 18] = std::array::from_fn(|i| 0.1 + 0.045 * i as f64);
        let plan = cls_plan_coords(&tape, &[(7, cls_sample_points(&r, om))], frame);
        let eff = dck_effective_kernel(base, lambda, beta);
        let a = cs_conv_forward(x, eff, Some(m), &plan, &[7]).unwrap().value();
        let b = cs_conv_forward_grouped(x, base, lambda, beta, Some(m), &plan, &[7]).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
