//! Synthetic oriented scenes, DOTA annotation I/O and training targets.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::geometry::{clip_convex, encode_gghl, merect_of, polygon_area, GghlBox, MERect, Point, Polygon4};
use crate::label_assign::{gaussian_field, GaussianField, DEFAULT_T};
use crate::model::{ModelConfig, STRIDES};
use crate::sampling::GridFrame;

pub const DEFAULT_CLASSES: [&str; 3] = ["solid", "striped", "dotted"];
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub polygon: Polygon4,
    pub class: usize,
    pub difficult: bool,
    /// The annotation was altered to fit (clipped or replaced by its MERect).
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[h, w, c]` with values in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
    /// Fewer objects than requested could be placed.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub count: (usize, usize),
    /// Range of the long side, pixels.
    pub size: (f64, f64),
    /// Range of long / short.
    pub aspect: (f64, f64),
    pub num_classes: usize,
    /// Background noise amplitude.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { width: 64, height: 64, count: (1, 3), size: (14.0, 40.0), aspect: (1.0, 2.2), num_classes: 3, noise: 0.3 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err("scene size must be positive".into());
        }
        if self.count.0 > self.count.1 {
            return Err("count range is empty".into());
        }
        if !(self.size.0 > 0.0 && self.size.0 <= self.size.1) {
            return Err("size range must be positive and ordered".into());
        }
        if !(self.aspect.0 >= 1.0 && self.aspect.0 <= self.aspect.1) {
            return Err("aspect range must start at 1 or more and be ordered".into());
        }
        if self.num_classes == 0 {
            return Err("need at least one class".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err("noise must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Fill intensity of class `class` at rectangle-frame offset `(u, v)`.
/// Class 0 is solid, 1 striped across the long axis, 2 dotted; further
/// classes cycle. The channel matching the class is slightly brighter.
fn fill(class: usize, u: f64, v: f64, channel: usize) -> f64 {
    let base = match class % 3 {
        0 => 0.85,
        1 => {
            if (u / 2.0).floor().rem_euclid(2.0) == 0.0 {
                0.9
            } else {
                0.45
            }
        }
        _ => {
            if (u / 2.0).floor().rem_euclid(2.0) == 0.0 && (v / 2.0).floor().rem_euclid(2.0) == 0.0 {
                0.95
            } else {
                0.45
            }
        }
    };
    if channel % 3 == class % 3 {
        base
    } else {
        base * 0.8
    }
}

fn expanded(r: &MERect, margin: f64) -> Polygon4 {
    MERect::new(r.center, r.long + 2.0 * margin, r.short + 2.0 * margin, r.angle).corners()
}

/// Renders rotated rectangles with class textures over uniform noise.
/// Objects never overlap and stay one pixel inside the image. Pixel values
/// are multiples of 1/255, so the scene survives a PNG round trip.
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let c = 3;
    let mut data: Vec<f64> = (0..w * h * c).map(|_| quantize(rng.random::<f64>() * spec.noise)).collect();
    let want = rng.random_range(spec.count.0..=spec.count.1);
    let mut rects: Vec<(MERect, usize)> = Vec::with_capacity(want);
    let mut attempts = 0;
    while rects.len() < want && attempts < MAX_ATTEMPTS {
        attempts += 1;
        let long = rng.random_range(spec.size.0..=spec.size.1);
        let short = long / rng.random_range(spec.aspect.0..=spec.aspect.1);
        let angle = rng.random_range(0.0..PI);
        let class = rng.random_range(0..spec.num_classes);
        let (s, co) = angle.sin_cos();
        let hx = (long * co.abs() + short * s.abs()) / 2.0;
        let hy = (long * s.abs() + short * co.abs()) / 2.0;
        let (xr, yr) = (w as f64 - 2.0 * hx - 2.0, h as f64 - 2.0 * hy - 2.0);
        if xr <= 0.0 || yr <= 0.0 {
            continue;
        }
        let center = Point::new(1.0 + hx + rng.random::<f64>() * xr, 1.0 + hy + rng.random::<f64>() * yr);
        let r = MERect::new(center, long, short, angle);
        let grown = expanded(&r, 1.5);
        let clash = rects
            .iter()
            .any(|(o, _)| polygon_area(&clip_convex(&grown.pts, &expanded(o, 1.5).pts)) > 0.0);
        if !clash {
            rects.push((r, class));
        }
    }
    for (r, class) in &rects {
        let poly = r.corners();
        let hbb = poly.hbb();
        let (s, co) = r.angle.sin_cos();
        for y in hbb.y1.floor().max(0.0) as usize..(hbb.y2.ceil() as usize).min(h) {
            for x in hbb.x1.floor().max(0.0) as usize..(hbb.x2.ceil() as usize).min(w) {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                if !poly.contains(p, 0.0) {
                    continue;
                }
                let (dx, dy) = (p.x - r.center.x, p.y - r.center.y);
                let (u, v) = (co * dx + s * dy + r.long / 2.0, -s * dx + co * dy + r.short / 2.0);
                for ch in 0..c {
                    data[(y * w + x) * c + ch] = quantize(fill(*class, u, v, ch));
                }
            }
        }
    }
    Scene {
        image: Tensor::new(vec![h, w, c], data),
        objects: rects
            .iter()
            .map(|(r, class)| SceneObject { polygon: r.corners(), class: *class, difficult: false, flagged: false })
            .collect(),
        flagged: rects.len() < want,
    }
}

/// Mirrors the scene left to right.
pub fn flip_horizontal(scene: &Scene) -> Scene {
    let (w, h, c) = (scene.image.width(), scene.image.height(), scene.image.channels());
    let image = Tensor::grid_from_fn(w, h, c, |x, y, ch| scene.image.at(w - 1 - x, y, ch));
    let objects = scene
        .objects
        .iter()
        .map(|o| SceneObject { polygon: Polygon4::from_points(o.polygon.pts.map(|p| Point::new(w as f64 - p.x, p.y))), ..*o })
        .collect();
    Scene { image, objects, flagged: scene.flagged }
}

/// Rotates the scene by `quarter_turns * 90` degrees clockwise on screen.
pub fn rotate90(scene: &Scene, quarter_turns: usize) -> Scene {
    let mut s = scene.clone();
    for _ in 0..quarter_turns % 4 {
        let (w, h, c) = (s.image.width(), s.image.height(), s.image.channels());
        // new (x, y) = (h - y, x)
        let image = Tensor::grid_from_fn(h, w, c, |x, y, ch| s.image.at(y, h - 1 - x, ch));
        let objects = s
            .objects
            .iter()
            .map(|o| SceneObject { polygon: Polygon4::from_points(o.polygon.pts.map(|p| Point::new(h as f64 - p.y, p.x))), ..*o })
            .collect();
        s = Scene { image, objects, flagged: s.flagged };
    }
    s
}

/// Rotates by an arbitrary angle about the image center with
/// nearest-neighbour resampling. Objects leaving the image are clipped to its
/// bounds (replaced by the MERect of the clipped region) and flagged;
/// objects left with no area are dropped.
pub fn rotate_arbitrary(scene: &Scene, angle: f64) -> Scene {
    let (w, h, c) = (scene.image.width(), scene.image.height(), scene.image.channels());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, co) = angle.sin_cos();
    let image = Tensor::grid_from_fn(w, h, c, |x, y, ch| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        // inverse rotation
        let sx = cx + co * dx + s * dy;
        let sy = cy - s * dx + co * dy;
        let (ix, iy) = (sx.floor(), sy.floor());
        if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
            0.0
        } else {
            scene.image.at(ix as usize, iy as usize, ch)
        }
    });
    let bounds = [Point::new(0.0, 0.0), Point::new(w as f64, 0.0), Point::new(w as f64, h as f64), Point::new(0.0, h as f64)];
    let mut objects = Vec::new();
    for o in &scene.objects {
        let pts = o.polygon.pts.map(|p| {
            let (dx, dy) = (p.x - cx, p.y - cy);
            Point::new(cx + co * dx - s * dy, cy + s * dx + co * dy)
        });
        let poly = Polygon4::from_points(pts);
        if poly.pts.iter().all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= w as f64 && p.y <= h as f64) {
            objects.push(SceneObject { polygon: poly, ..*o });
            continue;
        }
        let clipped = clip_convex(&poly.pts, &bounds);
        if polygon_area(&clipped) < 1.0 {
            continue;
        }
        if let Some(r) = merect_of_points(&clipped) {
            let inside = clip_convex(&r.corners().pts, &bounds);
            if let Some(r2) = merect_of_points(&inside) {
                objects.push(SceneObject { polygon: r2.corners(), flagged: true, ..*o });
            }
        }
    }
    Scene { image, objects, flagged: scene.flagged }
}

/// Minimum-area rectangle over the edge directions of a convex point list.
fn merect_of_points(pts: &[Point]) -> Option<MERect> {
    let n = pts.len();
    let mut best: Option<(f64, MERect)> = None;
    for i in 0..n {
        let e = Point::new(pts[(i + 1) % n].x - pts[i].x, pts[(i + 1) % n].y - pts[i].y);
        let len = (e.x * e.x + e.y * e.y).sqrt();
        if len < 1e-9 {
            continue;
        }
        let (ux, uy) = (e.x / len, e.y / len);
        let (mut a0, mut a1, mut b0, mut b1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in pts {
            let a = p.x * ux + p.y * uy;
            let b = -p.x * uy + p.y * ux;
            a0 = a0.min(a);
            a1 = a1.max(a);
            b0 = b0.min(b);
            b1 = b1.max(b);
        }
        let area = (a1 - a0) * (b1 - b0);
        let (ca, cb) = ((a0 + a1) / 2.0, (b0 + b1) / 2.0);
        let center = Point::new(ca * ux - cb * uy, ca * uy + cb * ux);
        let (du, dv) = (a1 - a0, b1 - b0);
        let r = if du >= dv {
            MERect::new(center, du, dv, uy.atan2(ux).rem_euclid(PI))
        } else {
            MERect::new(center, dv, du, ux.atan2(-uy).rem_euclid(PI))
        };
        if best.is_none_or(|(a, _)| area < a) {
            best = Some((area, r));
        }
    }
    best.filter(|(a, _)| *a > 1e-9).map(|(_, r)| r)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DotaRecord {
    pub polygon: Polygon4,
    pub class: String,
    pub difficult: bool,
    /// The quad was not convex and was replaced by its MERect.
    pub flagged: bool,
}

/// Parses DOTA annotation text. Leading `imagesource:` / `gsd:` lines are
/// skipped; every other non-empty line must hold eight coordinates, a
/// category and a difficulty flag. With a non-empty `classes`, unknown
/// categories are errors.
pub fn parse_dota_str(text: &str, classes: &[String]) -> Result<Vec<DotaRecord>, ParseError> {
    let mut out = Vec::new();
    let mut header = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if header && (line.starts_with("imagesource:") || line.starts_with("gsd:")) {
            continue;
        }
        header = false;
        let err = |msg: String| ParseError::Line { line: lineno, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 10 {
            return Err(err(format!("expected 10 fields, got {}", f.len())));
        }
        let mut v = [0.0; 8];
        for (k, s) in f[..8].iter().enumerate() {
            v[k] = s.parse::<f64>().map_err(|_| err(format!("bad coordinate `{s}`")))?;
            if !v[k].is_finite() {
                return Err(err(format!("non-finite coordinate `{s}`")));
            }
        }
        let class = f[8].to_string();
        if !classes.is_empty() && !classes.contains(&class) {
            return Err(err(format!("unknown category `{class}`")));
        }
        let difficult = match f[9] {
            "0" => false,
            "1" => true,
            s => return Err(err(format!("difficulty must be 0 or 1, got `{s}`"))),
        };
        let poly = Polygon4::from_points([
            Point::new(v[0], v[1]),
            Point::new(v[2], v[3]),
            Point::new(v[4], v[5]),
            Point::new(v[6], v[7]),
        ]);
        let (polygon, flagged) = if poly.is_convex() {
            (poly, false)
        } else {
            let r = merect_of(&poly).map_err(|e| err(format!("degenerate quad: {e}")))?;
            (r.corners(), true)
        };
        out.push(DotaRecord { polygon, class, difficult, flagged });
    }
    Ok(out)
}

pub fn parse_dota(path: &Path, classes: &[String]) -> Result<Vec<DotaRecord>, ParseError> {
    let text = fs::read_to_string(path).map_err(|e| ParseError::Io(format!("{}: {e}", path.display())))?;
    parse_dota_str(&text, classes)
}

pub fn format_dota(objects: &[SceneObject], classes: &[String]) -> String {
    let mut s = String::new();
    for o in objects {
        for p in o.polygon.pts {
            let _ = write!(s, "{} {} ", p.x, p.y);
        }
        let _ = writeln!(s, "{} {}", classes[o.class], u8::from(o.difficult));
    }
    s
}

/// Supervision for one object on its assigned level.
#[derive(Debug, Clone)]
pub struct ObjectTarget {
    pub object: usize,
    pub level: usize,
    pub class: usize,
    pub polygon: Polygon4,
    pub merect: MERect,
    pub field: GaussianField,
    /// Polygon area over HBB area.
    pub a: f64,
    /// Encoded box per position; `None` where the anchor is outside the HBB.
    pub boxes: Vec<Option<GghlBox>>,
    /// No position passed the threshold: the center cell was forced.
    pub forced: bool,
}

impl ObjectTarget {
    pub fn eligible(&self) -> Vec<bool> {
        self.boxes.iter().map(Option::is_some).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncodedTargets {
    pub frames: Vec<GridFrame>,
    pub objects: Vec<ObjectTarget>,
}

impl EncodedTargets {
    pub fn on_level(&self, level: usize) -> impl Iterator<Item = &ObjectTarget> {
        self.objects.iter().filter(move |o| o.level == level)
    }
}

pub fn level_frames(width: usize, height: usize) -> Vec<GridFrame> {
    STRIDES
        .iter()
        .map(|&s| {
            let (pw, ph) = (width.div_ceil(STRIDES[1]) * STRIDES[1], height.div_ceil(STRIDES[1]) * STRIDES[1]);
            GridFrame::new(pw / s, ph / s, s as f64)
        })
        .collect()
}

/// Routes every object to a level by its HBB max side and encodes it at each
/// position whose cell center lies strictly inside the HBB. If no such
/// position scores above the threshold, the cell holding the MERect center is
/// given score 1 and the object is marked forced.
pub fn encode_targets(scene: &Scene, config: &ModelConfig) -> EncodedTargets {
    let frames = level_frames(scene.image.width(), scene.image.height());
    let mut objects = Vec::with_capacity(scene.objects.len());
    for (i, o) in scene.objects.iter().enumerate() {
        let hbb = o.polygon.hbb();
        let level = config.level_of(hbb.width().max(hbb.height()));
        let frame = frames[level];
        let merect = match merect_of(&o.polygon) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let mut field = gaussian_field(&merect, frame);
        let boxes: Vec<Option<GghlBox>> = (0..frame.len())
            .map(|p| {
                let c = frame.cell_center(p);
                (c.x > hbb.x1 && c.x < hbb.x2 && c.y > hbb.y1 && c.y < hbb.y2).then(|| encode_gghl(&o.polygon, c))
            })
            .collect();
        let mut forced = false;
        if !(0..frame.len()).any(|p| boxes[p].is_some() && field.values[p] > DEFAULT_T) {
            let cx = ((merect.center.x / frame.stride).floor() as usize).min(frame.width - 1);
            let cy = ((merect.center.y / frame.stride).floor() as usize).min(frame.height - 1);
            field.values[cy * frame.width + cx] = 1.0;
            forced = true;
        }
        objects.push(ObjectTarget {
            object: i,
            level,
            class: o.class,
            polygon: o.polygon,
            merect,
            field,
            a: o.polygon.area() / hbb.area(),
            boxes,
            forced,
        });
    }
    EncodedTargets { frames, objects }
}

/// Writes an 8-bit PNG (grayscale for one channel, RGB for three).
pub fn save_png(image: &Tensor, path: &Path) -> Result<(), String> {
    let (w, h, c) = (image.width() as u32, image.height() as u32, image.channels());
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let res = match c {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        _ => return Err(format!("cannot save {c}-channel image")),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(format!("{}: {e}", path.display())),
        None => Err("buffer size mismatch".into()),
    }
}

/// Reads a PNG as RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h, w, 3], data))
}

pub const DATASET_MANIFEST: &str = "manifest.txt";

/// Writes `NNNN.png` / `NNNN.txt` pairs plus a manifest listing them, one
/// pair per line.
pub fn write_dataset(dir: &Path, scenes: &[Scene], classes: &[String]) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut manifest = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let (img, ann) = (format!("{i:04}.png"), format!("{i:04}.txt"));
        save_png(&s.image, &dir.join(&img))?;
        fs::write(dir.join(&ann), format_dota(&s.objects, classes)).map_err(|e| e.to_string())?;
        let _ = writeln!(manifest, "{img}\t{ann}");
    }
    fs::write(dir.join(DATASET_MANIFEST), manifest).map_err(|e| e.to_string())
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}")]
    Io(String),
    #[error("{file}: {source}")]
    Parse { file: String, source: ParseError },
}

pub fn read_dataset(dir: &Path, classes: &[String]) -> Result<Vec<Scene>, DatasetError> {
    let manifest = fs::read_to_string(dir.join(DATASET_MANIFEST)).map_err(|e| DatasetError::Io(format!("{}: {e}", dir.display())))?;
    let mut scenes = Vec::new();
    for (i, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (img, ann) = line
            .split_once('\t')
            .ok_or_else(|| DatasetError::Io(format!("manifest line {}: expected `image<TAB>annotation`", i + 1)))?;
        let image = load_png(&dir.join(img)).map_err(DatasetError::Io)?;
        let records = parse_dota(&dir.join(ann), classes).map_err(|source| DatasetError::Parse { file: ann.to_string(), source })?;
        let objects = records
            .into_iter()
            .map(|r| SceneObject {
                polygon: r.polygon,
                class: classes.iter().position(|c| *c == r.class).unwrap_or(0),
                difficult: r.difficult,
                flagged: r.flagged,
            })
            .collect();
        scenes.push(Scene { image, objects, flagged: false });
    }
    Ok(scenes)
}

pub fn default_classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{decode_gghl, iou_polygon};

    fn classes() -> Vec<String> {
        default_classes()
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(synth_scene(5, &spec), synth_scene(5, &spec));
        assert_ne!(synth_scene(5, &spec).image, synth_scene(6, &spec).image);
    }

    #[test]
    fn exact_count() {
        let spec = SceneSpec { count: (1, 1), ..SceneSpec::default() };
        for seed in 0..10 {
            let s = synth_scene(seed, &spec);
            assert_eq!(s.objects.len(), 1);
            assert!(!s.flagged);
        }
    }

    #[test]
    fn solid_area_matches_pixel_count() {
        let spec = SceneSpec { count: (1, 1), num_classes: 1, noise: 0.0, size: (20.0, 40.0), ..SceneSpec::default() };
        for seed in 0..20 {
            let s = synth_scene(seed, &spec);
            let lit = (0..64 * 64).filter(|p| s.image.data()[p * 3] > 0.5).count() as f64;
            let area = s.objects[0].polygon.area();
            assert!((lit - area).abs() / area < 0.05, "seed {seed}: {lit} vs {area}");
        }
    }

    #[test]
    fn unsatisfiable_placement_flags() {
        let spec = SceneSpec { count: (20, 20), size: (30.0, 40.0), ..SceneSpec::default() };
        let s = synth_scene(1, &spec);
        assert!(s.flagged);
        assert!(s.objects.len() < 20);
    }

    #[test]
    fn objects_inside_and_disjoint() {
        let spec = SceneSpec { count: (3, 5), ..SceneSpec::default() };
        for seed in 0..20 {
            let s = synth_scene(seed, &spec);
            for (i, a) in s.objects.iter().enumerate() {
                let r = a.polygon.hbb();
                assert!(r.x1 >= 0.0 && r.y1 >= 0.0 && r.x2 <= 64.0 && r.y2 <= 64.0);
                for b in &s.objects[i + 1..] {
                    assert_eq!(iou_polygon(&a.polygon, &b.polygon), 0.0);
                }
            }
        }
    }

    #[test]
    fn dota_square() {
        let r = parse_dota_str("0 0 4 0 4 4 0 4 plane 0\n", &[]).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].class, "plane");
        assert_eq!(r[0].polygon.area(), 16.0);
        assert!(!r[0].difficult && !r[0].flagged);
    }

    #[test]
    fn dota_header_and_two_objects() {
        let text = "imagesource:GoogleEarth\ngsd:0.146\n0 0 4 0 4 4 0 4 plane 0\n10 10 14 10 14 12 10 12 ship 1\n";
        let r = parse_dota_str(text, &[]).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[1].difficult);
    }

    #[test]
    fn dota_counter_clockwise_normalized() {
        let cw = parse_dota_str("0 0 4 0 4 4 0 4 a 0", &[]).unwrap()[0].polygon;
        let ccw = parse_dota_str("0 0 0 4 4 4 4 0 a 0", &[]).unwrap()[0].polygon;
        assert_eq!(cw, ccw);
        assert_eq!(cw.area(), ccw.area());
    }

    #[test]
    fn dota_errors_carry_line() {
        let e = parse_dota_str("gsd:1\n0 0 4 0 4 4 0 4 a 0\n0 0 4 x 4 4 0 4 a 0\n", &[]).unwrap_err();
        assert_eq!(e, ParseError::Line { line: 3, msg: "bad coordinate `x`".into() });
        let e = parse_dota_str("0 0 4 0 4 4 0 4 car 0\n", &["plane".to_string()]).unwrap_err();
        assert!(matches!(e, ParseError::Line { line: 1, .. }));
        assert!(parse_dota_str("0 0 4 0 4 4 0 4 a\n", &[]).is_err());
    }

    #[test]
    fn dota_nonconvex_flagged() {
        // dart: the fourth vertex is pushed inside
        let r = parse_dota_str("0 0 4 0 4 4 3 1 a 0", &[]).unwrap();
        assert!(r[0].flagged);
        assert!(r[0].polygon.is_convex());
    }

    #[test]
    fn encode_centered_object() {
        // 16 x 12 rectangle centered on the level-0 cell center (20, 20)
        let poly = crate::geometry::Rect::new(12.0, 14.0, 28.0, 26.0).to_polygon();
        let scene = Scene {
            image: Tensor::grid(64, 64, 3),
            objects: vec![SceneObject { polygon: poly, class: 1, difficult: false, flagged: false }],
            flagged: false,
        };
        let t = encode_targets(&scene, &ModelConfig::default());
        let o = &t.objects[0];
        assert_eq!(o.level, 0);
        let pos = 2 * 8 + 2;
        let b = o.boxes[pos].unwrap();
        assert_eq!(b.l, [6.0, 8.0, 6.0, 8.0]);
        assert!((o.field.values[pos] - 1.0).abs() < 1e-12);
        assert!((o.a - 1.0).abs() < 1e-12);
        assert!(!o.forced);
    }

    #[test]
    fn encoding_round_trips() {
        let spec = SceneSpec { count: (2, 4), ..SceneSpec::default() };
        for seed in 0..20 {
            let s = synth_scene(seed, &spec);
            let t = encode_targets(&s, &ModelConfig::default());
            for o in &t.objects {
                for b in o.boxes.iter().flatten() {
                    let (_, poly) = decode_gghl(b).unwrap();
                    assert!(iou_polygon(&poly, &o.polygon) >= 0.95);
                    for (p, q) in poly.pts.iter().zip(o.polygon.pts) {
                        assert!(p.dist(q) < 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn targets_superpose() {
        let a = crate::geometry::Rect::new(4.0, 4.0, 18.0, 16.0).to_polygon();
        let b = crate::geometry::Rect::new(40.0, 40.0, 56.0, 54.0).to_polygon();
        let obj = |p| SceneObject { polygon: p, class: 0, difficult: false, flagged: false };
        let scene = |objs: Vec<SceneObject>| Scene { image: Tensor::grid(64, 64, 3), objects: objs, flagged: false };
        let both = encode_targets(&scene(vec![obj(a), obj(b)]), &ModelConfig::default());
        let only_a = encode_targets(&scene(vec![obj(a)]), &ModelConfig::default());
        assert_eq!(both.objects[0].field.values, only_a.objects[0].field.values);
        assert_eq!(both.objects[0].boxes, only_a.objects[0].boxes);
    }

    #[test]
    fn tiny_object_forced() {
        let p = crate::geometry::Rect::new(9.0, 9.0, 11.0, 15.0).to_polygon();
        let scene = Scene {
            image: Tensor::grid(64, 64, 3),
            objects: vec![SceneObject { polygon: p, class: 0, difficult: false, flagged: false }],
            flagged: false,
        };
        let t = encode_targets(&scene, &ModelConfig::default());
        assert!(t.objects[0].forced);
        assert_eq!(t.objects[0].field.values[8 + 1], 1.0);
    }

    #[test]
    fn flips_and_rotations_keep_annotations_on_pixels() {
        let spec = SceneSpec { count: (1, 1), num_classes: 1, noise: 0.0, ..SceneSpec::default() };
        let s = synth_scene(3, &spec);
        for t in [flip_horizontal(&s), rotate90(&s, 1), rotate90(&s, 3)] {
            let lit = (0..64 * 64).filter(|p| t.image.data()[p * 3] > 0.5).count() as f64;
            let area = t.objects[0].polygon.area();
            assert!((lit - area).abs() / area < 0.05);
            let c = t.objects[0].polygon.centroid();
            assert!(t.image.at(c.x as usize, c.y as usize, 0) > 0.5);
        }
        assert_eq!(rotate90(&s, 4), s);
        let r = rotate_arbitrary(&s, 0.3);
        assert_eq!(r.objects.len(), 1);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes: Vec<Scene> = (0..3).map(|i| synth_scene(i, &SceneSpec::default())).collect();
        write_dataset(dir.path(), &scenes, &classes()).unwrap();
        let back = read_dataset(dir.path(), &classes()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.image.max_abs_diff(&b.image), 0.0);
            assert_eq!(a.objects.len(), b.objects.len());
            for (x, y) in a.objects.iter().zip(&b.objects) {
                assert_eq!(x.class, y.class);
                for (p, q) in x.polygon.pts.iter().zip(y.polygon.pts) {
                    assert!(p.dist(q) < 1e-9);
                }
            }
        }
    }
}
