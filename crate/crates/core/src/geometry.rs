//! Oriented box representations and the polygon measures built on them.
//!
//! Coordinates are image pixels with `y` pointing down. "Clockwise" therefore
//! means clockwise as drawn on screen, which is a positive shoelace area in
//! these coordinates. Angles are measured from the positive `x` axis and grow
//! clockwise on screen (plain `atan2(dy, dx)` in image coordinates).

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }
}

/// Axis-aligned rectangle, `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, p: Point, tol: f64) -> bool {
        p.x >= self.x1 - tol && p.x <= self.x2 + tol && p.y >= self.y1 - tol && p.y <= self.y2 + tol
    }

    pub fn to_polygon(&self) -> Polygon4 {
        Polygon4::from_points([
            Point::new(self.x1, self.y1),
            Point::new(self.x2, self.y1),
            Point::new(self.x2, self.y2),
            Point::new(self.x1, self.y2),
        ])
    }
}

/// Box encoded relative to a grid anchor.
///
/// `l` holds the distances from the anchor to the top, right, bottom and left
/// edges of the horizontal box. `s` holds the glide of each oriented vertex
/// along its edge: `s[0]` from the top-left corner rightwards, `s[1]` from the
/// top-right corner downwards, `s[2]` from the bottom-right corner leftwards
/// and `s[3]` from the bottom-left corner upwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GghlBox {
    pub anchor: Point,
    pub l: [f64; 4],
    pub s: [f64; 4],
}

impl GghlBox {
    pub fn new(anchor: Point, l: [f64; 4], s: [f64; 4]) -> Self {
        Self { anchor, l, s }
    }

    pub fn hbb(&self) -> Rect {
        let Point { x, y } = self.anchor;
        Rect::new(x - self.l[3], y - self.l[0], x + self.l[1], y + self.l[2])
    }

    /// The nine key points, row-major over the 3x3 layout: HBB corners at
    /// 0, 2, 6, 8, oriented vertices at 1 (top), 3 (left), 5 (right),
    /// 7 (bottom) and the anchor at 4.
    pub fn key_points(&self) -> [Point; 9] {
        let Point { x, y } = self.anchor;
        let [l1, l2, l3, l4] = self.l;
        let [s1, s2, s3, s4] = self.s;
        [
            Point::new(x - l4, y - l1),
            Point::new(x - l4 + s1, y - l1),
            Point::new(x + l2, y - l1),
            Point::new(x - l4, y + l3 - s4),
            Point::new(x, y),
            Point::new(x + l2, y - l1 + s2),
            Point::new(x - l4, y + l3),
            Point::new(x + l2 - s3, y + l3),
            Point::new(x + l2, y + l3),
        ]
    }

    /// Ratio of oriented-box area to horizontal-box area.
    pub fn area_ratio(&self) -> Result<f64, GeometryError> {
        let (hbb, poly) = decode_gghl(self)?;
        Ok(poly.area() / hbb.area())
    }

    /// True when every glide lies within its edge and every distance is
    /// non-negative.
    pub fn is_valid(&self) -> bool {
        let w = self.l[1] + self.l[3];
        let h = self.l[0] + self.l[2];
        self.l.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.s.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.s[0] <= w
            && self.s[2] <= w
            && self.s[1] <= h
            && self.s[3] <= h
    }
}

/// Quadrilateral stored clockwise, starting from the vertex on the top edge
/// of its horizontal box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polygon4 {
    pub pts: [Point; 4],
}

impl Polygon4 {
    /// Normalizes the winding to clockwise and rotates the vertex list so it
    /// starts at the topmost vertex (leftmost on ties).
    pub fn from_points(mut pts: [Point; 4]) -> Self {
        if signed_area(&pts) < 0.0 {
            pts.reverse();
        }
        let start = (0..4)
            .min_by(|&a, &b| {
                pts[a]
                    .y
                    .partial_cmp(&pts[b].y)
                    .unwrap()
                    .then(pts[a].x.partial_cmp(&pts[b].x).unwrap())
            })
            .unwrap();
        pts.rotate_left(start);
        Self { pts }
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.pts).abs()
    }

    pub fn hbb(&self) -> Rect {
        let mut r = Rect::new(f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &self.pts {
            r.x1 = r.x1.min(p.x);
            r.y1 = r.y1.min(p.y);
            r.x2 = r.x2.max(p.x);
            r.y2 = r.y2.max(p.y);
        }
        r
    }

    pub fn centroid(&self) -> Point {
        let (sx, sy) = self.pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        Point::new(sx / 4.0, sy / 4.0)
    }

    /// Strict convexity check: every turn has the same sign and no three
    /// consecutive vertices are collinear.
    pub fn is_convex(&self) -> bool {
        let mut sign = 0.0;
        for i in 0..4 {
            let a = self.pts[i];
            let b = self.pts[(i + 1) % 4];
            let c = self.pts[(i + 2) % 4];
            let cr = b.sub(a).cross(c.sub(b));
            if cr.abs() < 1e-12 {
                return false;
            }
            if sign == 0.0 {
                sign = cr.signum();
            } else if cr.signum() != sign {
                return false;
            }
        }
        true
    }

    pub fn contains(&self, p: Point, tol: f64) -> bool {
        convex_contains(&self.pts, p, tol)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Polygon4 {
        let mut pts = self.pts;
        for q in &mut pts {
            q.x += dx;
            q.y += dy;
        }
        Polygon4 { pts }
    }
}

fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += pts[i].cross(pts[(i + 1) % n]);
    }
    acc * 0.5
}

/// Membership test for a clockwise (screen) convex polygon. `tol` is the
/// allowed signed distance outside any edge.
pub fn convex_contains(pts: &[Point], p: Point, tol: f64) -> bool {
    let n = pts.len();
    (0..n).all(|i| {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let e = b.sub(a);
        let len = e.dot(e).sqrt();
        if len == 0.0 {
            return true;
        }
        // Interior lies on the positive-cross side for positive-area winding.
        e.cross(p.sub(a)) / len >= -tol
    })
}

/// Distance from `p` to the segment `a`-`b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(Point::new(a.x + t * ab.x, a.y + t * ab.y))
}

/// Minimum external rectangle: long side `long`, short side `short`, long-side
/// angle `angle` in `[0, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MERect {
    pub center: Point,
    pub long: f64,
    pub short: f64,
    pub angle: f64,
}

impl MERect {
    pub fn new(center: Point, long: f64, short: f64, angle: f64) -> Self {
        Self { center, long, short, angle }
    }

    /// Rotates the local offset `(u, v)` (along the long and short sides) into
    /// image coordinates about the center.
    pub fn to_image(&self, u: f64, v: f64) -> Point {
        let (s, c) = self.angle.sin_cos();
        Point::new(self.center.x + c * u - s * v, self.center.y + s * u + c * v)
    }

    pub fn corners(&self) -> Polygon4 {
        let (hu, hv) = (self.long / 2.0, self.short / 2.0);
        Polygon4::from_points([
            self.to_image(-hu, -hv),
            self.to_image(hu, -hv),
            self.to_image(hu, hv),
            self.to_image(-hu, hv),
        ])
    }

    pub fn area(&self) -> f64 {
        self.long * self.short
    }
}

/// Decodes an anchor-relative box into its horizontal box and oriented
/// polygon.
pub fn decode_gghl(b: &GghlBox) -> Result<(Rect, Polygon4), GeometryError> {
    let w = b.l[1] + b.l[3];
    let h = b.l[0] + b.l[2];
    if !(w > 0.0 && h > 0.0) {
        return Err(GeometryError::DegenerateBox(format!("l = {:?}", b.l)));
    }
    let q = b.key_points();
    // Clockwise from the top edge: top, right, bottom, left.
    let poly = Polygon4 { pts: [q[1], q[5], q[7], q[3]] };
    Ok((b.hbb(), poly))
}

/// Encodes `poly` relative to `anchor`. Each oriented vertex is the extreme
/// vertex in its direction; ties are broken clockwise so that an axis-aligned
/// rectangle encodes with zero glides.
pub fn encode_gghl(poly: &Polygon4, anchor: Point) -> GghlBox {
    let r = poly.hbb();
    let pts = &poly.pts;
    let pick = |key: &dyn Fn(&Point) -> (f64, f64)| -> Point {
        *pts
            .iter()
            .min_by(|a, b| key(a).partial_cmp(&key(b)).unwrap())
            .unwrap()
    };
    let top = pick(&|p| (p.y, p.x));
    let right = pick(&|p| (-p.x, p.y));
    let bottom = pick(&|p| (-p.y, -p.x));
    let left = pick(&|p| (p.x, -p.y));
    GghlBox {
        anchor,
        l: [anchor.y - r.y1, r.x2 - anchor.x, r.y2 - anchor.y, anchor.x - r.x1],
        s: [top.x - r.x1, right.y - r.y1, r.x2 - bottom.x, r.y2 - left.y],
    }
}

/// Rotating calipers over the polygon's edge directions.
pub fn merect_of(poly: &Polygon4) -> Result<MERect, GeometryError> {
    if poly.area() < 1e-12 {
        return Err(GeometryError::DegeneratePolygon("zero area".into()));
    }
    let pts = &poly.pts;
    let mut best: Option<(f64, MERect)> = None;
    for i in 0..4 {
        let e = pts[(i + 1) % 4].sub(pts[i]);
        let len = e.dot(e).sqrt();
        if len < 1e-12 {
            continue;
        }
        let u = Point::new(e.x / len, e.y / len);
        let v = Point::new(-u.y, u.x);
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in pts {
            let pu = p.dot(u);
            let pv = p.dot(v);
            umin = umin.min(pu);
            umax = umax.max(pu);
            vmin = vmin.min(pv);
            vmax = vmax.max(pv);
        }
        let (du, dv) = (umax - umin, vmax - vmin);
        let area = du * dv;
        let (cu, cv) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
        let center = Point::new(cu * u.x + cv * v.x, cu * u.y + cv * v.y);
        let (long, short, dir) = if du >= dv { (du, dv, u) } else { (dv, du, v) };
        let rect = MERect::new(center, long, short, normalize_angle(dir.y.atan2(dir.x)));
        if best.map_or(true, |(a, _)| area < a - 1e-12) {
            best = Some((area, rect));
        }
    }
    match best {
        Some((a, r)) if a > 1e-12 && r.short > 1e-12 => Ok(r),
        _ => Err(GeometryError::DegeneratePolygon("collinear vertices".into())),
    }
}

fn normalize_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(PI);
    if a >= PI - 1e-12 {
        a = 0.0;
    }
    a
}

pub fn iou_hbb(a: &Rect, b: &Rect) -> f64 {
    let inter = Rect::new(a.x1.max(b.x1), a.y1.max(b.y1), a.x2.min(b.x2), a.y2.min(b.y2)).area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou_hbb(a: &Rect, b: &Rect) -> f64 {
    let inter = Rect::new(a.x1.max(b.x1), a.y1.max(b.y1), a.x2.min(b.x2), a.y2.min(b.y2)).area();
    let union = a.area() + b.area() - inter;
    let hull = Rect::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2)).area();
    if union <= 0.0 || hull <= 0.0 {
        return -1.0;
    }
    inter / union - (hull - union) / hull
}

/// Sutherland-Hodgman clip of a convex subject against a convex clip polygon,
/// both with positive (clockwise on screen) winding.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let e = b.sub(a);
        let side = |p: Point| e.cross(p.sub(a));
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

pub fn polygon_area(pts: &[Point]) -> f64 {
    if pts.len() < 3 {
        0.0
    } else {
        signed_area(pts).abs()
    }
}

pub fn iou_polygon(a: &Polygon4, b: &Polygon4) -> f64 {
    let inter = polygon_area(&clip_convex(&a.pts, &b.pts));
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
