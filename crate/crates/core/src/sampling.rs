//! Shared machinery for the two task-wise sampling convolutions: fixed tap
//! offset sets, pixel/grid coordinate frames and the assembly of per-position
//! sampling coordinates.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::autodiff::{sampled_conv3x3, AutodiffError, Tensor, Var};
use crate::geometry::Point;

/// Tap `j` of a 3x3 kernel sits at row `j / 3`, column `j % 3`.
pub fn tap_offset(j: usize) -> (f64, f64) {
    ((j % 3) as f64 - 1.0, (j / 3) as f64 - 1.0)
}

/// `(dx, dy)` offsets of the plain 3x3 neighbourhood.
pub fn square_offsets() -> [(f64, f64); 9] {
    std::array::from_fn(tap_offset)
}

/// The circular neighbourhood: edge taps at distance 1, corner taps pulled in
/// to the unit circle at `(+-sqrt(2)/2, +-sqrt(2)/2)`.
pub fn circular_offsets() -> [(f64, f64); 9] {
    std::array::from_fn(|j| {
        let (dx, dy) = tap_offset(j);
        if dx != 0.0 && dy != 0.0 {
            (dx * FRAC_1_SQRT_2, dy * FRAC_1_SQRT_2)
        } else {
            (dx, dy)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapLayout {
    Square,
    Circular,
}

impl TapLayout {
    pub fn offsets(self) -> [(f64, f64); 9] {
        match self {
            TapLayout::Square => square_offsets(),
            TapLayout::Circular => circular_offsets(),
        }
    }
}

/// Maps between feature-grid indices and image pixels for one pyramid level.
/// Cell `(i, j)` is centered on pixel `((i + 0.5) * stride, (j + 0.5) * stride)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub width: usize,
    pub height: usize,
    pub stride: f64,
}

impl GridFrame {
    pub fn new(width: usize, height: usize, stride: f64) -> Self {
        Self { width, height, stride }
    }

    pub fn cell_center(&self, pos: usize) -> Point {
        let (x, y) = (pos % self.width, pos / self.width);
        Point::new((x as f64 + 0.5) * self.stride, (y as f64 + 0.5) * self.stride)
    }

    pub fn to_grid(&self, p: Point) -> (f64, f64) {
        (p.x / self.stride - 0.5, p.y / self.stride - 0.5)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed sampling coordinates `[h, w, 9, 2]` for every position.
pub fn fixed_coords(width: usize, height: usize, layout: TapLayout) -> Tensor {
    let off = layout.offsets();
    let mut data = Vec::with_capacity(width * height * 18);
    for y in 0..height {
        for x in 0..width {
            for (dx, dy) in off {
                data.push(x as f64 + dx);
                data.push(y as f64 + dy);
            }
        }
    }
    Tensor::new(vec![height, width, 9, 2], data)
}

/// Sampling coordinates (grid units) for a set of positions, `[P, 9, 2]`
/// flattened. `positions` are flat `y * width + x` indices.
#[derive(Debug, Clone)]
pub struct PlanCoords<'t> {
    pub positions: Vec<usize>,
    pub coords: Var<'t>,
}

/// Builds the differentiable per-position coordinates `base + sum_k param[idx_k] * dir_k`.
///
/// Each of the `P * 18` coordinate components has a constant base and up to
/// two `(parameter index, direction)` terms, covering both sliding points
/// (one parameter per point) and in-rectangle placement (two per point).
pub struct AffineCoords {
    pub base: Vec<f64>,
    pub terms: [Vec<(usize, f64)>; 2],
}

impl AffineCoords {
    pub fn new() -> Self {
        Self { base: Vec::new(), terms: [Vec::new(), Vec::new()] }
    }

    /// Pushes one coordinate component.
    pub fn push(&mut self, base: f64, t0: (usize, f64), t1: (usize, f64)) {
        self.base.push(base);
        self.terms[0].push(t0);
        self.terms[1].push(t1);
    }

    pub fn build<'t>(&self, params: Var<'t>) -> Var<'t> {
        let tape = params.tape();
        let mut out = tape.constant(Tensor::vector(self.base.clone()));
        for terms in &self.terms {
            if terms.iter().all(|(_, d)| *d == 0.0) {
                continue;
            }
            let idx: Vec<usize> = terms.iter().map(|(i, _)| *i).collect();
            let dir = tape.constant(Tensor::vector(terms.iter().map(|(_, d)| *d).collect()));
            out = out.add(params.gather(&idx).mul(dir));
        }
        out
    }
}

impl Default for AffineCoords {
    fn default() -> Self {
        Self::new()
    }
}

/// Modulated 3x3 sampling convolution: positions listed in `plan` sample at
/// the plan coordinates, every other position at `layout`'s fixed offsets.
pub fn plan_conv<'t>(
    input: Var<'t>,
    kernel: Var<'t>,
    layout: TapLayout,
    plan: Option<&PlanCoords<'t>>,
    modulation: Option<Var<'t>>,
) -> Result<Var<'t>, AutodiffError> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 3 {
        return Err(AutodiffError::Shape(format!("input must be a grid, got {ishape:?}")));
    }
    let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
    if kshape.len() != 3 || kshape[0] != 9 || kshape[1] != c {
        return Err(AutodiffError::Shape(format!("kernel {kshape:?} does not fit {c} input channels")));
    }
    if let Some(m) = modulation {
        if m.shape() != [h, w, 9] {
            return Err(AutodiffError::Shape(format!("modulation {:?}, expected [{h}, {w}, 9]", m.shape())));
        }
    }
    let tape = input.tape();
    let base = tape.constant(fixed_coords(w, h, layout));
    let coords = match plan {
        Some(p) if !p.positions.is_empty() => {
            if p.coords.len() != p.positions.len() * 18 {
                return Err(AutodiffError::Shape("plan coordinates must be [P, 9, 2]".into()));
            }
            if let Some(bad) = p.positions.iter().find(|&&q| q >= w * h) {
                return Err(AutodiffError::Contract(format!("plan position {bad} outside grid")));
            }
            let idx: Vec<usize> = p.positions.iter().flat_map(|&q| q * 18..q * 18 + 18).collect();
            base.overwrite(&idx, p.coords.reshape(vec![idx.len()]))
        }
        _ => base,
    };
    Ok(sampled_conv3x3(input, kernel, coords, modulation))
}
