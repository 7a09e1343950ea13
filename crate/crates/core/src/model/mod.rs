//! Two-level toy detector: a small strided backbone, a two-level pyramid and
//! decoupled localization/classification heads shared across levels.
//!
//! Each level runs in two passes. The initial predictor yields `l`, `s`, `a`
//! and objectness; boxes at the positive positions then drive LS-Conv (whose
//! output refines the box) and CS-Conv with the dynamic circular kernel
//! (whose output classifies).

mod checkpoint;
mod params;

use thiserror::Error;

use crate::autodiff::{conv2d, AutodiffError, Tape, Tensor, Var};
use crate::cs_conv::{cls_sample_points, cs_conv_forward, dck_effective_kernel, omega_plan_coords, ClsSamplePlan};
use crate::geometry::{decode_gghl, merect_of, GghlBox, MERect, Point};
use crate::ls_conv::{embed_coords_var, loc_sample_points, ls_conv_forward, refine_obb_var, sigma_plan_coords, LocSamplePlan};
use crate::postprocess::{nms_rotated, Detection};
use crate::sampling::GridFrame;

pub use checkpoint::{load_checkpoint, save_checkpoint, ManifestError, PARAMS_FILE, MANIFEST_FILE};
pub use params::{init_store, orthogonal, Bound, Init, ParamStore};

pub const STRIDES: [usize; 2] = [8, 16];
pub const LEAKY_SLOPE: f64 = 0.1;
pub const DEFAULT_PREFILTER: f64 = 0.05;
pub const DEFAULT_LEVEL_SPLIT: f64 = 24.0;
const RAW_L_CLAMP: f64 = 4.0;
const RAW_DELTA_CLAMP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// LS-Conv and CS-Conv with the dynamic circular kernel.
    TsConv,
    /// Plain 3x3 convolutions in both branches.
    Plain,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::TsConv => "tsconv",
            HeadKind::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tsconv" => Some(HeadKind::TsConv),
            "plain" => Some(HeadKind::Plain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of the four backbone stages.
    pub widths: [usize; 4],
    /// Pyramid and head width.
    pub feat: usize,
    pub num_classes: usize,
    pub head: HeadKind,
    /// Objects whose box max side is below this go to level 0.
    pub level_split: f64,
    /// Objectness above which the sampling branches run at inference.
    pub prefilter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [8, 16, 16, 32],
            feat: 16,
            num_classes: 3,
            head: HeadKind::TsConv,
            level_split: DEFAULT_LEVEL_SPLIT,
            prefilter: DEFAULT_PREFILTER,
        }
    }
}

impl ModelConfig {
    pub fn level_of(&self, max_side: f64) -> usize {
        usize::from(max_side >= self.level_split)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.in_channels == 0 || self.feat == 0 || self.num_classes == 0 || self.widths.contains(&0) {
            return Err("model sizes must be positive".into());
        }
        if !(self.level_split > 0.0 && self.level_split.is_finite()) {
            return Err("level_split must be positive".into());
        }
        if !(0.0..1.0).contains(&self.prefilter) {
            return Err("prefilter must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Parameter names, shapes and initializers in store order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let ortho = Init::Orthogonal(gain);
        let mut v = Vec::new();
        let mut conv = |name: &str, k: usize, cin: usize, cout: usize, init: Init, bias: bool| {
            v.push((format!("{name}.w"), vec![k * k, cin, cout], init));
            if bias {
                v.push((format!("{name}.b"), vec![cout], Init::Zeros));
            }
        };
        let [w0, w1, w2, w3] = self.widths;
        let f = self.feat;
        conv("backbone.c1", 3, self.in_channels, w0, ortho, true);
        conv("backbone.c2", 3, w0, w1, ortho, true);
        conv("backbone.c3", 3, w1, w2, ortho, true);
        conv("backbone.c4", 3, w2, w3, ortho, true);
        conv("fpn.lat0", 1, w2, f, ortho, true);
        conv("fpn.lat1", 1, w3, f, ortho, true);
        conv("fpn.smooth0", 3, f, f, ortho, true);
        conv("fpn.smooth1", 3, f, f, ortho, true);
        conv("head.loc_stem", 3, f, f, ortho, true);
        conv("head.cls_stem", 3, f, f, ortho, true);
        conv("head.init", 1, f, 10, Init::Zeros, true);
        let ts = self.head == HeadKind::TsConv;
        if ts {
            conv("head.sigma", 1, f, 4, Init::Zeros, true);
            conv("head.m_loc", 1, f, 9, Init::Zeros, true);
            conv("head.omega", 1, f, 18, Init::Zeros, true);
            conv("head.m_cls", 1, f, 9, Init::Zeros, true);
            conv("head.lambda", 1, f, 4, Init::Zeros, true);
            conv("head.beta", 1, f, 8, Init::Zeros, true);
        }
        conv("head.ls_kernel", 3, if ts { f + 2 } else { f }, f, ortho, false);
        conv("head.cs_kernel", 3, f, f, ortho, false);
        conv("head.refine", 1, f, 8, Init::Zeros, true);
        conv("head.cls", 1, f, self.num_classes, Init::Zeros, true);
        v
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Where the sampling branches use box-driven plans.
#[derive(Debug, Clone, Copy)]
pub enum Positives<'a> {
    /// Flat positions per level, as chosen by an assigner.
    Given(&'a [Vec<usize>]),
    /// Positions whose objectness exceeds the threshold.
    Prefilter(f64),
    /// Positions together with the boxes their plans are built from. The
    /// plan boxes are constants either way; this pins their values so a
    /// finite-difference probe sees the same graph the tape differentiates.
    Frozen(&'a [Vec<(usize, GghlBox)>]),
}

enum Select {
    Given(Vec<usize>),
    Threshold(f64),
    Boxes(Vec<(usize, GghlBox)>),
}

/// Differentiable outputs of one pyramid level. Per-position vectors are
/// flattened row-major: `obj`, `a` have one value per position, `l*`, `s*`
/// four, `cls` one per category.
#[derive(Debug, Clone)]
pub struct LevelOutput<'t> {
    pub frame: GridFrame,
    pub positives: Vec<usize>,
    pub obj: Var<'t>,
    pub a: Var<'t>,
    pub l_init: Var<'t>,
    pub s_init: Var<'t>,
    pub l_ref: Var<'t>,
    pub s_ref: Var<'t>,
    pub cls: Var<'t>,
    pub sigma: Option<Var<'t>>,
    pub omega: Option<Var<'t>>,
    pub m_loc: Option<Var<'t>>,
    pub m_cls: Option<Var<'t>>,
    pub lambda: Option<Var<'t>>,
    pub beta: Option<Var<'t>>,
    /// Detached initial boxes that placed the plans at `positives`.
    pub boxes: Vec<(usize, GghlBox)>,
    pub plain: bool,
}

impl LevelOutput<'_> {
    pub fn values(&self, num_classes: usize) -> LevelValues {
        LevelValues {
            frame: self.frame,
            positives: self.positives.clone(),
            num_classes,
            obj: self.obj.data(),
            a: self.a.data(),
            l_init: self.l_init.data(),
            s_init: self.s_init.data(),
            l_ref: self.l_ref.data(),
            s_ref: self.s_ref.data(),
            cls: self.cls.data(),
            sigma: self.sigma.map(|v| v.data()),
            omega: self.omega.map(|v| v.data()),
            m_loc: self.m_loc.map(|v| v.data()),
            m_cls: self.m_cls.map(|v| v.data()),
            lambda: self.lambda.map(|v| v.data()),
            beta: self.beta.map(|v| v.data()),
            plain: self.plain,
        }
    }
}

pub struct Forward<'s, 't> {
    pub params: Bound<'s, 't>,
    pub levels: Vec<LevelOutput<'t>>,
}

impl Forward<'_, '_> {
    pub fn values(&self, num_classes: usize) -> Vec<LevelValues> {
        self.levels.iter().map(|l| l.values(num_classes)).collect()
    }
}

/// Plain-value snapshot of a [`LevelOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct LevelValues {
    pub frame: GridFrame,
    pub positives: Vec<usize>,
    pub num_classes: usize,
    pub obj: Vec<f64>,
    pub a: Vec<f64>,
    pub l_init: Vec<f64>,
    pub s_init: Vec<f64>,
    pub l_ref: Vec<f64>,
    pub s_ref: Vec<f64>,
    pub cls: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    pub omega: Option<Vec<f64>>,
    pub m_loc: Option<Vec<f64>>,
    pub m_cls: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub plain: bool,
}

fn four(v: &[f64], pos: usize) -> [f64; 4] {
    std::array::from_fn(|i| v[pos * 4 + i])
}

impl LevelValues {
    pub fn is_positive(&self, pos: usize) -> bool {
        self.positives.binary_search(&pos).is_ok()
    }

    pub fn initial_box(&self, pos: usize) -> GghlBox {
        GghlBox::new(self.frame.cell_center(pos), four(&self.l_init, pos), four(&self.s_init, pos))
    }

    pub fn refined_box(&self, pos: usize) -> GghlBox {
        GghlBox::new(self.frame.cell_center(pos), four(&self.l_ref, pos), four(&self.s_ref, pos))
    }

    /// Refined box where the refinement saw a plan (everywhere for plain
    /// heads), the initial box elsewhere.
    pub fn output_box(&self, pos: usize) -> GghlBox {
        if self.plain || self.is_positive(pos) {
            self.refined_box(pos)
        } else {
            self.initial_box(pos)
        }
    }

    pub fn class_probs(&self, pos: usize) -> &[f64] {
        &self.cls[pos * self.num_classes..(pos + 1) * self.num_classes]
    }

    /// Best class and its confidence `obj * p(class)`.
    pub fn score(&self, pos: usize) -> (usize, f64) {
        let probs = self.class_probs(pos);
        let (c, p) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        (c, self.obj[pos] * p)
    }

    /// Localization sampling points at a positive position, pixels.
    pub fn loc_plan(&self, pos: usize) -> Option<LocSamplePlan> {
        let sigma = self.sigma.as_ref()?;
        if !self.is_positive(pos) {
            return None;
        }
        let plan = loc_sample_points(&self.initial_box(pos), four(sigma, pos));
        Some(match &self.m_loc {
            Some(m) => plan.with_modulation(std::array::from_fn(|j| m[pos * 9 + j])),
            None => plan,
        })
    }

    /// Classification sampling points at a positive position, pixels.
    pub fn cls_plan(&self, pos: usize) -> Option<ClsSamplePlan> {
        let omega = self.omega.as_ref()?;
        if !self.is_positive(pos) {
            return None;
        }
        let mut plan = cls_sample_points(&predicted_merect(&self.initial_box(pos)), std::array::from_fn(|i| omega[pos * 18 + i]));
        if let Some(m) = &self.m_cls {
            plan.modulation = std::array::from_fn(|j| m[pos * 9 + j]);
        }
        Some(plan)
    }
}

/// Minimum external rectangle of a box's polygon, falling back to its
/// horizontal box when the polygon is degenerate.
pub fn predicted_merect(b: &GghlBox) -> MERect {
    let hbb = b.hbb();
    let fallback = || {
        let c = Point::new((hbb.x1 + hbb.x2) / 2.0, (hbb.y1 + hbb.y2) / 2.0);
        let (w, h) = (hbb.width().max(1e-6), hbb.height().max(1e-6));
        if w >= h {
            MERect::new(c, w, h, 0.0)
        } else {
            MERect::new(c, h, w, std::f64::consts::FRAC_PI_2)
        }
    };
    match decode_gghl(b) {
        Ok((_, poly)) => merect_of(&poly).unwrap_or_else(|_| fallback()),
        Err(_) => fallback(),
    }
}

/// One detection per position whose confidence exceeds `conf_thresh`.
pub fn decode(levels: &[LevelValues], conf_thresh: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for lv in levels {
        for pos in 0..lv.frame.len() {
            let (class, score) = lv.score(pos);
            if score <= conf_thresh {
                continue;
            }
            if let Ok((_, polygon)) = decode_gghl(&lv.output_box(pos)) {
                out.push(Detection { polygon, class, score });
            }
        }
    }
    out
}

/// Zero-pads the bottom and right edges up to a multiple of `m`.
pub fn pad_image(image: &Tensor, m: usize) -> Tensor {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    if (pw, ph) == (w, h) {
        return image.clone();
    }
    Tensor::grid_from_fn(pw, ph, c, |x, y, ch| if x < w && y < h { image.at(x, y, ch) } else { 0.0 })
}

fn conv<'t>(p: &Bound<'_, 't>, name: &str, x: Var<'t>, k: usize, stride: usize) -> Var<'t> {
    conv2d(x, p.get(&format!("{name}.w")), p.maybe(&format!("{name}.b")), k, stride)
}

fn act(v: Var<'_>) -> Var<'_> {
    v.leaky_relu(LEAKY_SLOPE)
}

fn side_index(n: usize, cols: [usize; 4]) -> Vec<usize> {
    (0..n).flat_map(|r| cols.map(|c| r * 4 + c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsConvModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl TsConvModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let params = init_store(&config.layout(), seed);
        Self { config, params }
    }

    /// Wraps existing parameters after checking them against the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, String> {
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(format!("expected {} parameters, found {}", layout.len(), params.len()));
        }
        for ((name, shape, _), (pn, pt)) in layout.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(format!("parameter {pn} {:?} does not match {name} {shape:?}", pt.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn forward<'s, 't>(&'s self, tape: &'t Tape, image: &Tensor, positives: Positives<'_>) -> Result<Forward<'s, 't>, ModelError> {
        let cfg = &self.config;
        if image.shape().len() != 3 || image.channels() != cfg.in_channels {
            return Err(ModelError::Input(format!("image shape {:?}, expected [h, w, {}]", image.shape(), cfg.in_channels)));
        }
        let lists = match positives {
            Positives::Given(g) => Some(g.len()),
            Positives::Frozen(b) => Some(b.len()),
            Positives::Prefilter(_) => None,
        };
        if let Some(k) = lists.filter(|&k| k != STRIDES.len()) {
            return Err(ModelError::Input(format!("{k} positive lists for {} levels", STRIDES.len())));
        }
        let p = self.params.bind(tape);
        let centered = Tensor::new(image.shape().to_vec(), image.data().iter().map(|v| 2.0 * v - 1.0).collect());
        let x = tape.constant(pad_image(&centered, STRIDES[1]));
        let c1 = act(conv(&p, "backbone.c1", x, 3, 2));
        let c2 = act(conv(&p, "backbone.c2", c1, 3, 2));
        let c3 = act(conv(&p, "backbone.c3", c2, 3, 2));
        let c4 = act(conv(&p, "backbone.c4", c3, 3, 2));
        let lat0 = conv(&p, "fpn.lat0", c3, 1, 1);
        let lat1 = conv(&p, "fpn.lat1", c4, 1, 1);
        let p0 = act(conv(&p, "fpn.smooth0", lat0.add(lat1.upsample2x()), 3, 1));
        let p1 = act(conv(&p, "fpn.smooth1", lat1, 3, 1));
        let mut levels = Vec::with_capacity(2);
        for (li, feat) in [p0, p1].into_iter().enumerate() {
            let sel = match positives {
                Positives::Given(g) => {
                    let mut v = g[li].clone();
                    v.sort_unstable();
                    v.dedup();
                    Select::Given(v)
                }
                Positives::Prefilter(t) => Select::Threshold(t),
                Positives::Frozen(b) => {
                    let mut v = b[li].clone();
                    v.sort_unstable_by_key(|(q, _)| *q);
                    v.dedup_by_key(|(q, _)| *q);
                    Select::Boxes(v)
                }
            };
            levels.push(self.level(&p, feat, STRIDES[li], sel)?);
        }
        Ok(Forward { params: p, levels })
    }

    fn level<'t>(&self, p: &Bound<'_, 't>, feat: Var<'t>, stride: usize, sel: Select) -> Result<LevelOutput<'t>, ModelError> {
        let shape = feat.shape();
        let (h, w) = (shape[0], shape[1]);
        let n = h * w;
        let frame = GridFrame::new(w, h, stride as f64);
        let plain = self.config.head == HeadKind::Plain;
        let loc = act(conv(p, "head.loc_stem", feat, 3, 1));
        let cls = act(conv(p, "head.cls_stem", feat, 3, 1));
        let init = conv(p, "head.init", loc, 1, 1);
        let l_init = init
            .slice_channels(0, 4)
            .clamp(-RAW_L_CLAMP, RAW_L_CLAMP)
            .exp()
            .mul_scalar(stride as f64)
            .reshape(vec![n * 4]);
        let side = l_init.gather(&side_index(n, [1, 0, 1, 0])).add(l_init.gather(&side_index(n, [3, 2, 3, 2])));
        let s_init = init.slice_channels(4, 4).sigmoid().reshape(vec![n * 4]).mul(side);
        let a = init.slice_channels(8, 1).sigmoid().reshape(vec![n]);
        let obj = init.slice_channels(9, 1).sigmoid().reshape(vec![n]);

        let (lv, sv) = (l_init.data(), s_init.data());
        let predicted = |q: usize| (q, GghlBox::new(frame.cell_center(q), four(&lv, q), four(&sv, q)));
        if let Select::Given(v) = &sel {
            if let Some(bad) = v.iter().find(|&&q| q >= n) {
                return Err(ModelError::Input(format!("positive position {bad} outside a {w}x{h} grid")));
            }
        }
        let boxes: Vec<(usize, GghlBox)> = match sel {
            Select::Given(v) => v.into_iter().map(predicted).collect(),
            Select::Threshold(t) => obj.data().iter().enumerate().filter(|(_, &o)| o > t).map(|(i, _)| predicted(i)).collect(),
            Select::Boxes(b) => b,
        };
        if let Some((bad, _)) = boxes.iter().find(|(q, _)| *q >= n) {
            return Err(ModelError::Input(format!("positive position {bad} outside a {w}x{h} grid")));
        }
        let positives: Vec<usize> = boxes.iter().map(|(q, _)| *q).collect();

        let mut out_sigma = None;
        let mut out_omega = None;
        let mut out_mloc = None;
        let mut out_mcls = None;
        let mut out_lambda = None;
        let mut out_beta = None;
        let (o_loc, o_cls) = if plain {
            (
                conv2d(loc, p.get("head.ls_kernel.w"), None, 3, 1),
                conv2d(cls, p.get("head.cs_kernel.w"), None, 3, 1),
            )
        } else {
            let sigma = conv(p, "head.sigma", loc, 1, 1).sigmoid();
            let m_loc = conv(p, "head.m_loc", loc, 1, 1).sigmoid();
            let plan = sigma_plan_coords(&boxes, sigma, frame);
            let o_loc = ls_conv_forward(embed_coords_var(loc), p.get("head.ls_kernel.w"), Some(m_loc), &plan, &positives)?;

            let omega = conv(p, "head.omega", cls, 1, 1).sigmoid();
            let m_cls = conv(p, "head.m_cls", cls, 1, 1).sigmoid();
            let gap = cls.global_avg_pool();
            let lambda = conv(p, "head.lambda", gap, 1, 1).sigmoid().reshape(vec![4]);
            let beta = conv(p, "head.beta", gap, 1, 1).reshape(vec![8]).softmax();
            let kernel = dck_effective_kernel(p.get("head.cs_kernel.w"), lambda, beta);
            let rects: Vec<(usize, MERect)> = boxes.iter().map(|(q, b)| (*q, predicted_merect(b))).collect();
            let cplan = omega_plan_coords(&rects, omega, frame);
            let o_cls = cs_conv_forward(cls, kernel, Some(m_cls), &cplan, &positives)?;
            out_sigma = Some(sigma);
            out_omega = Some(omega);
            out_mloc = Some(m_loc);
            out_mcls = Some(m_cls);
            out_lambda = Some(lambda);
            out_beta = Some(beta);
            (o_loc, o_cls)
        };
        let refine = conv(p, "head.refine", act(o_loc), 1, 1);
        let dl = refine.slice_channels(0, 4).clamp(-RAW_DELTA_CLAMP, RAW_DELTA_CLAMP).exp().reshape(vec![n * 4]);
        let ds = refine.slice_channels(4, 4).clamp(-RAW_DELTA_CLAMP, RAW_DELTA_CLAMP).exp().reshape(vec![n * 4]);
        let (l_ref, s_ref) = refine_obb_var(l_init, s_init, dl, ds);
        let cls_prob = conv(p, "head.cls", act(o_cls), 1, 1).sigmoid().reshape(vec![n * self.config.num_classes]);
        Ok(LevelOutput {
            frame,
            positives,
            obj,
            a,
            l_init,
            s_init,
            l_ref,
            s_ref,
            cls: cls_prob,
            sigma: out_sigma,
            omega: out_omega,
            m_loc: out_mloc,
            m_cls: out_mcls,
            lambda: out_lambda,
            beta: out_beta,
            boxes,
            plain,
        })
    }

    /// Inference snapshot with the objectness pre-filter choosing positives.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<LevelValues>, ModelError> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, image, Positives::Prefilter(self.config.prefilter))?;
        Ok(fwd.values(self.config.num_classes))
    }

    /// Decoded, suppressed detections for one image.
    pub fn detect(&self, image: &Tensor, conf_thresh: f64, nms_iou: f64) -> Result<Vec<Detection>, ModelError> {
        Ok(nms_rotated(&decode(&self.predict(image)?, conf_thresh), nms_iou))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::grid_from_fn(w, h, 3, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn zero_image_gives_half_objectness() {
        let model = TsConvModel::new(ModelConfig::default(), 0);
        let lv = model.predict(&Tensor::grid(64, 64, 3)).unwrap();
        assert_eq!(lv.len(), 2);
        assert_eq!((lv[0].frame.width, lv[0].frame.height), (8, 8));
        assert_eq!((lv[1].frame.width, lv[1].frame.height), (4, 4));
        assert!(lv.iter().flat_map(|l| &l.obj).all(|&o| o == 0.5));
        assert_eq!(lv[0].cls.len(), 64 * 3);
    }

    #[test]
    fn padding_to_stride() {
        let model = TsConvModel::new(ModelConfig::default(), 0);
        let lv = model.predict(&random_image(50, 40, 1)).unwrap();
        assert_eq!((lv[0].frame.width, lv[0].frame.height), (8, 6));
        assert_eq!((lv[1].frame.width, lv[1].frame.height), (4, 3));
    }

    #[test]
    fn initial_box_at_init_is_one_stride_each_way() {
        let model = TsConvModel::new(ModelConfig::default(), 3);
        let lv = model.predict(&random_image(64, 64, 2)).unwrap();
        let b = lv[1].initial_box(5);
        assert_eq!(b.l, [16.0; 4]);
        assert_eq!(b.s, [16.0; 4]);
        // every position is positive at init (0.5 > 0.05): refined equals initial
        assert!(lv[1].is_positive(5));
        assert_eq!(lv[1].refined_box(5), b);
    }

    #[test]
    fn training_and_inference_agree_on_same_positives() {
        let model = TsConvModel::new(ModelConfig::default(), 4);
        let img = random_image(64, 64, 5);
        let infer = model.predict(&img).unwrap();
        let pos: Vec<Vec<usize>> = infer.iter().map(|l| l.positives.clone()).collect();
        let tape = Tape::new();
        let train = model.forward(&tape, &img, Positives::Given(&pos)).unwrap().values(3);
        assert_eq!(infer, train);
    }

    #[test]
    fn out_of_grid_positive_rejected() {
        let model = TsConvModel::new(ModelConfig::default(), 4);
        let tape = Tape::new();
        let pos = vec![vec![64], vec![]];
        assert!(matches!(model.forward(&tape, &Tensor::grid(64, 64, 3), Positives::Given(&pos)), Err(ModelError::Input(_))));
    }

    fn planted(l: [f64; 4], s: [f64; 4], obj: f64, cls: [f64; 3]) -> LevelValues {
        let frame = GridFrame::new(2, 1, 8.0);
        LevelValues {
            frame,
            positives: vec![0],
            num_classes: 3,
            obj: vec![obj, 0.0],
            a: vec![0.5, 0.5],
            l_init: [l, [1.0; 4]].concat(),
            s_init: [s, [0.0; 4]].concat(),
            l_ref: [l, [1.0; 4]].concat(),
            s_ref: [s, [0.0; 4]].concat(),
            cls: [cls, [0.0; 3]].concat(),
            sigma: None,
            omega: None,
            m_loc: None,
            m_cls: None,
            lambda: None,
            beta: None,
            plain: false,
        }
    }

    #[test]
    fn decode_planted_diamond() {
        // anchor (4, 4); half-extents 2 and glides 2 give the diamond through the edge midpoints
        let lv = planted([2.0; 4], [2.0; 4], 0.9, [0.1, 0.8, 0.2]);
        let dets = decode(&[lv], 0.5);
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        assert_eq!(d.class, 1);
        assert!((d.score - 0.72).abs() < 1e-12);
        let want = [Point::new(4.0, 2.0), Point::new(6.0, 4.0), Point::new(4.0, 6.0), Point::new(2.0, 4.0)];
        for (p, q) in d.polygon.pts.iter().zip(want) {
            assert!(p.dist(q) < 1e-12, "{p:?} vs {q:?}");
        }
    }

    #[test]
    fn decode_threshold_and_monotone_score() {
        let lv = planted([2.0; 4], [2.0; 4], 0.3, [0.1, 0.8, 0.2]);
        assert!(decode(&[lv.clone()], 0.5).is_empty());
        let mut up = lv.clone();
        up.obj[0] = 0.4;
        assert!(up.score(0).1 >= lv.score(0).1);
    }

    #[test]
    fn plain_layout_has_no_sampling_heads() {
        let plain = ModelConfig { head: HeadKind::Plain, ..ModelConfig::default() };
        let names: Vec<String> = plain.layout().into_iter().map(|(n, _, _)| n).collect();
        assert!(!names.iter().any(|n| n.starts_with("head.sigma") || n.starts_with("head.beta")));
        let ts: Vec<(String, Vec<usize>, Init)> = ModelConfig::default().layout();
        let k = ts.iter().find(|(n, _, _)| n == "head.ls_kernel.w").unwrap();
        assert_eq!(k.1, vec![9, 18, 16]);
    }
}
