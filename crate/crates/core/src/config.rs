//! Run configuration as flat `key=value` text.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::{default_classes, SceneSpec};
use crate::label_assign::{DEFAULT_GAMMA, DEFAULT_T, DEFAULT_THETA};
use crate::model::{HeadKind, ModelConfig};
use crate::postprocess::DEFAULT_NMS_IOU;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignerKind {
    Dtla,
    Static,
}

impl AssignerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AssignerKind::Dtla => "dtla",
            AssignerKind::Static => "static",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Value { key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory; synthetic scenes are generated when absent.
    pub data: Option<PathBuf>,
    pub scenes: usize,
    pub scene: SceneSpec,
    pub classes: Vec<String>,
    pub model: ModelConfig,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub iterations: usize,
    pub batch: usize,
    pub assigner: AssignerKind,
    pub t: f64,
    pub theta: f64,
    pub gamma: f64,
    pub nms_iou: f64,
    pub conf_thresh: f64,
    /// Evaluate on the training set every this many iterations; 0 disables.
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Random flips and quarter turns.
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            scenes: 16,
            scene: SceneSpec::default(),
            classes: default_classes(),
            model: ModelConfig::default(),
            lr: 5e-4,
            lr_min: 1e-6,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 0.0,
            iterations: 100,
            batch: 4,
            assigner: AssignerKind::Dtla,
            t: DEFAULT_T,
            theta: DEFAULT_THETA,
            gamma: DEFAULT_GAMMA,
            nms_iou: DEFAULT_NMS_IOU,
            conf_thresh: 0.05,
            eval_every: 0,
            checkpoint_every: 0,
            augment: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "data",
    "scenes",
    "scene_width",
    "scene_height",
    "count_min",
    "count_max",
    "size_min",
    "size_max",
    "aspect_min",
    "aspect_max",
    "noise",
    "classes",
    "widths",
    "feat",
    "head",
    "level_split",
    "prefilter",
    "lr",
    "lr_min",
    "momentum",
    "weight_decay",
    "grad_clip",
    "iterations",
    "batch",
    "assigner",
    "t",
    "theta",
    "gamma",
    "nms_iou",
    "conf_thresh",
    "eval_every",
    "checkpoint_every",
    "augment",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Value { key: key.into(), msg: format!("cannot parse `{v}`") })
}

fn range(key: &str, v: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(ConfigError::Value { key: key.into(), msg: format!("{v} outside [{lo}, {hi}]") })
    }
}

impl RunConfig {
    /// Applies one assignment without validating cross-key constraints.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "data" => self.data = if v.is_empty() || v == "synth" { None } else { Some(PathBuf::from(v)) },
            "scenes" => self.scenes = num(key, v)?,
            "scene_width" => self.scene.width = num(key, v)?,
            "scene_height" => self.scene.height = num(key, v)?,
            "count_min" => self.scene.count.0 = num(key, v)?,
            "count_max" => self.scene.count.1 = num(key, v)?,
            "size_min" => self.scene.size.0 = num(key, v)?,
            "size_max" => self.scene.size.1 = num(key, v)?,
            "aspect_min" => self.scene.aspect.0 = num(key, v)?,
            "aspect_max" => self.scene.aspect.1 = num(key, v)?,
            "noise" => self.scene.noise = num(key, v)?,
            "classes" => {
                self.classes = v.split(',').map(|s| s.trim().to_string()).collect();
                self.model.num_classes = self.classes.len();
                self.scene.num_classes = self.classes.len();
            }
            "widths" => {
                let ws: Vec<usize> = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_, _>>()?;
                self.model.widths = ws
                    .try_into()
                    .map_err(|_| ConfigError::Value { key: key.into(), msg: "need four comma-separated widths".into() })?;
            }
            "feat" => self.model.feat = num(key, v)?,
            "head" => {
                self.model.head = HeadKind::parse(v)
                    .ok_or_else(|| ConfigError::Value { key: key.into(), msg: format!("`{v}` is not tsconv or plain") })?
            }
            "level_split" => self.model.level_split = num(key, v)?,
            "prefilter" => self.model.prefilter = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_min" => self.lr_min = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "assigner" => {
                self.assigner = match v {
                    "dtla" => AssignerKind::Dtla,
                    "static" => AssignerKind::Static,
                    _ => return Err(ConfigError::Value { key: key.into(), msg: format!("`{v}` is not dtla or static") }),
                }
            }
            "t" => self.t = num(key, v)?,
            "theta" => self.theta = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "nms_iou" => self.nms_iou = num(key, v)?,
            "conf_thresh" => self.conf_thresh = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "augment" => {
                self.augment = match v {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(ConfigError::Value { key: key.into(), msg: format!("`{v}` is not a boolean") }),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected key=value, got `{line}`") })?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = |key: &str, msg: String| ConfigError::Value { key: key.into(), msg };
        self.scene.validate().map_err(|m| v("scene", m))?;
        self.model.validate().map_err(|m| v("model", m))?;
        if self.classes.is_empty() || self.classes.iter().any(|c| c.is_empty() || c.contains(char::is_whitespace)) {
            return Err(v("classes", "class names must be non-empty words".into()));
        }
        if self.model.num_classes != self.classes.len() || self.scene.num_classes != self.classes.len() {
            return Err(v("classes", "class count disagrees with the model".into()));
        }
        if self.model.in_channels != 3 {
            return Err(v("model", "images are RGB".into()));
        }
        range("lr", self.lr, 0.0, 10.0)?;
        range("lr_min", self.lr_min, 0.0, self.lr)?;
        range("momentum", self.momentum, 0.0, 0.999)?;
        range("weight_decay", self.weight_decay, 0.0, 1.0)?;
        range("grad_clip", self.grad_clip, 0.0, 1e6)?;
        range("t", self.t, 0.0, 1.0)?;
        range("theta", self.theta, 0.0, 1.0)?;
        range("gamma", self.gamma, 0.0, 10.0)?;
        range("nms_iou", self.nms_iou, 0.0, 1.0)?;
        range("conf_thresh", self.conf_thresh, 0.0, 1.0)?;
        if self.batch == 0 {
            return Err(v("batch", "must be at least 1".into()));
        }
        if self.data.is_none() && self.scenes == 0 {
            return Err(v("scenes", "must be at least 1 for synthetic data".into()));
        }
        Ok(())
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let m = &self.model;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("seed", self.seed.to_string());
        put("data", self.data.as_ref().map_or("synth".into(), |p| p.display().to_string()));
        put("scenes", self.scenes.to_string());
        put("scene_width", s.width.to_string());
        put("scene_height", s.height.to_string());
        put("count_min", s.count.0.to_string());
        put("count_max", s.count.1.to_string());
        put("size_min", s.size.0.to_string());
        put("size_max", s.size.1.to_string());
        put("aspect_min", s.aspect.0.to_string());
        put("aspect_max", s.aspect.1.to_string());
        put("noise", s.noise.to_string());
        put("classes", self.classes.join(","));
        put("widths", m.widths.map(|w| w.to_string()).join(","));
        put("feat", m.feat.to_string());
        put("head", m.head.as_str().into());
        put("level_split", m.level_split.to_string());
        put("prefilter", m.prefilter.to_string());
        put("lr", self.lr.to_string());
        put("lr_min", self.lr_min.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("iterations", self.iterations.to_string());
        put("batch", self.batch.to_string());
        put("assigner", self.assigner.as_str().into());
        put("t", self.t.to_string());
        put("theta", self.theta.to_string());
        put("gamma", self.gamma.to_string());
        put("nms_iou", self.nms_iou.to_string());
        put("conf_thresh", self.conf_thresh.to_string());
        put("eval_every", self.eval_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("augment", self.augment.to_string());
        out
    }
}
