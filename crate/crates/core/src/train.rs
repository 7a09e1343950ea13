//! Training loop: forward, assignment, losses, backward and an SGD step.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{concat, AutodiffError, Tape, Tensor, Var};
use crate::config::{AssignerKind, RunConfig};
use crate::data::{encode_targets, flip_horizontal, rotate90, synth_scene, EncodedTargets, Scene};
use crate::label_assign::{assign_dtla, assign_gghl_static, loc_score, AssignParams, AssignmentMap, ObjectScores, Tag};
use crate::losses::{classification_loss, loc_loss_rows, localization_loss, objectness_loss, total_loss, LocTarget, LossReport};
use crate::geometry::GghlBox;
use crate::model::{decode, Forward, LevelValues, ModelError, ParamStore, Positives, TsConvModel};
use crate::postprocess::{evaluate, nms_rotated, EvalConfig, EvalResult, GroundTruth};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss at iteration {iter}, image {image}\n{dump}")]
    NonFinite { iter: usize, image: usize, dump: String },
}

/// Synthetic scenes for a run, seeded per index.
pub fn synth_dataset(cfg: &RunConfig) -> Vec<Scene> {
    (0..cfg.scenes).map(|i| synth_scene(scene_seed(cfg.seed, i), &cfg.scene)).collect()
}

pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn ground_truth(scene: &Scene) -> Vec<GroundTruth> {
    scene
        .objects
        .iter()
        .map(|o| GroundTruth { polygon: o.polygon, class: o.class, difficult: o.difficult })
        .collect()
}

/// Positions that may become positive: eligible and above the prior
/// threshold for some object on the level.
pub fn candidate_positions(targets: &EncodedTargets, t: f64) -> Vec<Vec<usize>> {
    targets
        .frames
        .iter()
        .enumerate()
        .map(|(li, f)| {
            (0..f.len())
                .filter(|&p| targets.on_level(li).any(|o| o.boxes[p].is_some() && o.field.values[p] > t))
                .collect()
        })
        .collect()
}

/// Per-object scores on one level from the current predictions.
pub fn object_scores(values: &LevelValues, targets: &EncodedTargets, level: usize) -> Vec<ObjectScores> {
    targets
        .on_level(level)
        .map(|o| {
            let n = values.frame.len();
            let mut l = vec![0.0; n];
            let mut c = vec![0.0; n];
            for p in 0..n {
                c[p] = values.class_probs(p)[o.class];
                if let Some(gt) = &o.boxes[p] {
                    l[p] = loc_score(&values.refined_box(p), values.a[p], gt, o.a).0;
                }
            }
            ObjectScores { f: o.field.values.clone(), l, c, eligible: o.eligible() }
        })
        .collect()
}

pub fn assign_levels(values: &[LevelValues], targets: &EncodedTargets, kind: AssignerKind, prm: AssignParams) -> Vec<AssignmentMap> {
    values
        .iter()
        .enumerate()
        .map(|(li, v)| {
            let objs = object_scores(v, targets, li);
            let (w, h) = (v.frame.width, v.frame.height);
            match kind {
                AssignerKind::Dtla => assign_dtla(&objs, w, h, prm),
                AssignerKind::Static => assign_gghl_static(&objs, w, h, prm.t),
            }
        })
        .collect()
}

pub struct ImageStep {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
    pub maps: Vec<AssignmentMap>,
}

fn rows4(positions: &[usize]) -> Vec<usize> {
    positions.iter().flat_map(|&p| p * 4..p * 4 + 4).collect()
}

fn dump(values: &[LevelValues], maps: &[AssignmentMap]) -> String {
    let mut s = String::from("level\tpos\ttag\tF\tL\tD\tobj\n");
    for (li, (v, m)) in values.iter().zip(maps).enumerate() {
        for p in 0..m.len() {
            if m.tags[p] == Tag::Negative && v.obj[p].is_finite() {
                continue;
            }
            let _ = writeln!(s, "{li}\t{p}\t{}\t{}\t{}\t{}\t{}", m.tags[p].as_str(), m.f[p], m.l[p], m.d[p], v.obj[p]);
        }
    }
    s
}

/// Loss and parameter gradients for one image. The sampling branches run
/// at every candidate position; the assigner then picks positives among
/// them from the resulting predictions.
pub fn image_step(
    model: &TsConvModel,
    scene: &Scene,
    targets: &EncodedTargets,
    cfg: &RunConfig,
    iter: usize,
) -> Result<ImageStep, TrainError> {
    let tape = Tape::new();
    let cands = candidate_positions(targets, cfg.t);
    let fwd = model.forward(&tape, &scene.image, Positives::Given(&cands))?;
    let values = fwd.values(model.config.num_classes);
    let prm = AssignParams { t: cfg.t, theta: cfg.theta, iter, iter_max: cfg.iterations.max(1) };
    let maps = assign_levels(&values, targets, cfg.assigner, prm);
    let (total, report) = assigned_loss(&fwd, &maps, targets, cfg, model.config.num_classes);
    if !report.loss_total.is_finite() {
        return Err(TrainError::NonFinite { iter, image: 0, dump: dump(&values, &maps) });
    }
    let grads = tape.backward(total)?;
    let grads = fwd.params.vars.iter().map(|v| grads.wrt(*v)).collect();
    Ok(ImageStep { report, grads, maps })
}

/// Plan boxes used by a forward pass, per level.
pub fn plan_boxes(fwd: &Forward<'_, '_>) -> Vec<Vec<(usize, GghlBox)>> {
    fwd.levels.iter().map(|l| l.boxes.clone()).collect()
}

/// Training loss with every detached quantity held fixed: the assignment
/// (tags, owners, objectness targets, soft weights) and the plan boxes.
/// Returns the loss and the gradient for each parameter.
pub fn frozen_loss(
    model: &TsConvModel,
    scene: &Scene,
    targets: &EncodedTargets,
    cfg: &RunConfig,
    maps: &[AssignmentMap],
    boxes: &[Vec<(usize, GghlBox)>],
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let tape = Tape::new();
    let fwd = model.forward(&tape, &scene.image, Positives::Frozen(boxes))?;
    let (total, report) = assigned_loss(&fwd, maps, targets, cfg, model.config.num_classes);
    let grads = tape.backward(total)?;
    Ok((report.loss_total, fwd.params.vars.iter().map(|v| grads.wrt(*v)).collect()))
}

fn assigned_loss<'t>(
    fwd: &Forward<'_, 't>,
    maps: &[AssignmentMap],
    targets: &EncodedTargets,
    cfg: &RunConfig,
    mc: usize,
) -> (Var<'t>, LossReport) {
    let tape = fwd.levels[0].obj.tape();
    let obj_levels: Vec<(&AssignmentMap, Var<'t>)> = maps.iter().zip(&fwd.levels).map(|(m, l)| (m, l.obj)).collect();
    let (loss_obj, counts) = objectness_loss(&obj_levels, cfg.gamma);

    let mut loc_targets = Vec::new();
    let mut classes = Vec::new();
    let mut parts: [Vec<Var<'t>>; 6] = Default::default();
    for (li, (map, out)) in maps.iter().zip(&fwd.levels).enumerate() {
        let pos = map.positions(Tag::Positive);
        if pos.is_empty() {
            continue;
        }
        let level_objs: Vec<_> = targets.on_level(li).collect();
        for &p in &pos {
            let o = level_objs[map.owner[p].expect("positive has an owner")];
            loc_targets.push(LocTarget { gt: o.boxes[p].expect("positive is eligible"), a: o.a });
            classes.push(o.class);
        }
        let r4 = rows4(&pos);
        let cls_rows: Vec<usize> = pos.iter().flat_map(|&p| p * mc..p * mc + mc).collect();
        parts[0].push(out.l_init.gather(&r4));
        parts[1].push(out.s_init.gather(&r4));
        parts[2].push(out.a.gather(&pos));
        parts[3].push(out.l_ref.gather(&r4));
        parts[4].push(out.s_ref.gather(&r4));
        parts[5].push(out.cls.gather(&cls_rows));
    }
    let (loss_loc, loss_cls) = if loc_targets.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let [l0, s0, a, l1, s1, c] = parts.map(|v| concat(&v));
        let init_rows = loc_loss_rows(l0, s0, a, &loc_targets);
        let ref_rows = loc_loss_rows(l1, s1, a, &loc_targets);
        (localization_loss(init_rows, ref_rows), classification_loss(c, &classes, mc))
    };
    total_loss(loss_obj, loss_loc, loss_cls, counts)
}

/// `lr_min + (lr - lr_min) * (1 + cos(pi * iter / total)) / 2`.
pub fn cosine_lr(iter: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = (iter as f64 / total as f64).min(1.0);
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with momentum and decoupled-from-nothing L2 weight decay:
/// `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        for ((w, g), v) in params.values_mut().zip(grads).zip(&mut self.velocity) {
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

struct Sample {
    scene: Scene,
    targets: EncodedTargets,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: TsConvModel,
    pub opt: Sgd,
    samples: Vec<Sample>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub iter: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, scenes: Vec<Scene>) -> Self {
        let model = TsConvModel::new(cfg.model.clone(), cfg.seed);
        Self::with_model(cfg, scenes, model)
    }

    pub fn with_model(cfg: RunConfig, scenes: Vec<Scene>, model: TsConvModel) -> Self {
        let opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
        let samples = scenes
            .into_iter()
            .map(|scene| Sample { targets: encode_targets(&scene, &cfg.model), scene })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        Self { cfg, model, opt, samples, rng, order: Vec::new(), cursor: 0, iter: 0 }
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.samples.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One optimizer step over a batch; returns the batch-mean report.
    pub fn step(&mut self) -> Result<LossReport, TrainError> {
        let iter = self.iter;
        let b = self.cfg.batch.min(self.samples.len().max(1));
        let mut acc: Option<Vec<Tensor>> = None;
        let mut report = LossReport::default();
        for _ in 0..b {
            if self.samples.is_empty() {
                break;
            }
            let idx = self.next_index();
            let augmented;
            let (scene, targets) = if self.cfg.augment {
                let mut s = self.samples[idx].scene.clone();
                if self.rng.random::<bool>() {
                    s = flip_horizontal(&s);
                }
                s = rotate90(&s, self.rng.random_range(0..4));
                let t = encode_targets(&s, &self.cfg.model);
                augmented = (s, t);
                (&augmented.0, &augmented.1)
            } else {
                (&self.samples[idx].scene, &self.samples[idx].targets)
            };
            let step = image_step(&self.model, scene, targets, &self.cfg, iter).map_err(|e| match e {
                TrainError::NonFinite { iter, dump, .. } => TrainError::NonFinite { iter, image: idx, dump },
                other => other,
            })?;
            report.loss_obj += step.report.loss_obj / b as f64;
            report.loss_loc += step.report.loss_loc / b as f64;
            report.loss_cls += step.report.loss_cls / b as f64;
            report.loss_total += step.report.loss_total / b as f64;
            report.m_pos += step.report.m_pos;
            report.m_neg += step.report.m_neg;
            report.m_sneg += step.report.m_sneg;
            acc = Some(match acc {
                None => step.grads,
                Some(mut a) => {
                    for (x, g) in a.iter_mut().zip(&step.grads) {
                        x.data_mut().iter_mut().zip(g.data()).for_each(|(x, g)| *x += g);
                    }
                    a
                }
            });
        }
        if let Some(mut grads) = acc {
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= b as f64));
            clip_grad_norm(&mut grads, self.cfg.grad_clip);
            let lr = cosine_lr(iter, self.cfg.iterations, self.cfg.lr, self.cfg.lr_min);
            self.opt.step(&mut self.model.params, &grads, lr);
        }
        self.iter += 1;
        Ok(report)
    }

    /// Runs the remaining iterations, calling `on_iter` after each.
    pub fn run(&mut self, mut on_iter: impl FnMut(usize, &LossReport, &TsConvModel)) -> Result<(), TrainError> {
        while self.iter < self.cfg.iterations {
            let r = self.step()?;
            on_iter(self.iter - 1, &r, &self.model);
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<EvalResult, ModelError> {
        let scenes: Vec<Scene> = self.samples.iter().map(|s| s.scene.clone()).collect();
        evaluate_model(&self.model, &scenes, self.cfg.conf_thresh, self.cfg.nms_iou)
    }
}

/// Detects on every scene and scores against its annotations.
pub fn evaluate_model(model: &TsConvModel, scenes: &[Scene], conf_thresh: f64, nms_iou: f64) -> Result<EvalResult, ModelError> {
    let mut dets = Vec::with_capacity(scenes.len());
    for s in scenes {
        dets.push(model.detect(&s.image, conf_thresh, nms_iou)?);
    }
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(ground_truth).collect();
    Ok(evaluate(&dets, &gts, &EvalConfig::new(model.config.num_classes)))
}

/// Raw (pre-NMS) detections for one scene, for inspection.
pub fn raw_detections(model: &TsConvModel, scene: &Scene, conf_thresh: f64) -> Result<Vec<crate::postprocess::Detection>, ModelError> {
    Ok(decode(&model.predict(&scene.image)?, conf_thresh))
}

/// Suppressed detections for one scene.
pub fn detections(model: &TsConvModel, scene: &Scene, conf_thresh: f64, nms_iou: f64) -> Result<Vec<crate::postprocess::Detection>, ModelError> {
    Ok(nms_rotated(&raw_detections(model, scene, conf_thresh)?, nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        RunConfig { scenes: 2, iterations: 3, batch: 2, lr: 0.01, ..RunConfig::default() }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1.0, 0.1), 1.0);
        assert!((cosine_lr(10, 10, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(5, 10, 1.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0]));
        let mut opt = Sgd::new(&store, 0.9, 0.0);
        let g = vec![Tensor::vector(vec![1.0])];
        opt.step(&mut store, &g, 0.1);
        opt.step(&mut store, &g, 0.1);
        // v1 = 1, v2 = 1.9
        assert!((store.get("w").unwrap().data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_keeps_init() {
        let cfg = RunConfig { iterations: 0, ..small_cfg() };
        let mut tr = Trainer::new(cfg.clone(), synth_dataset(&cfg));
        tr.run(|_, _, _| {}).unwrap();
        assert_eq!(tr.model, TsConvModel::new(cfg.model.clone(), cfg.seed));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = small_cfg();
        let run = || {
            let mut tr = Trainer::new(cfg.clone(), synth_dataset(&cfg));
            let mut lines = Vec::new();
            tr.run(|i, r, _| lines.push(r.line(i))).unwrap();
            lines
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn dtla_positives_within_candidates() {
        let cfg = small_cfg();
        let scenes = synth_dataset(&cfg);
        let model = TsConvModel::new(cfg.model.clone(), 0);
        for s in &scenes {
            let t = encode_targets(s, &cfg.model);
            let step = image_step(&model, s, &t, &cfg, 0).unwrap();
            let cands = candidate_positions(&t, cfg.t);
            for (m, c) in step.maps.iter().zip(&cands) {
                for p in m.positions(Tag::Positive) {
                    assert!(c.contains(&p));
                }
            }
            assert!(step.report.m_pos >= t.objects.len().min(1));
        }
    }
}
