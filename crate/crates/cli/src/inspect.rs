//! Dumps for looking inside a model on one image.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use tsconv::autodiff::{Tape, Tensor};
use tsconv::config::RunConfig;
use tsconv::cs_conv::DckBank;
use tsconv::data::{encode_targets, load_png, parse_dota, save_png, Scene, SceneObject};
use tsconv::geometry::merect_of;
use tsconv::label_assign::{gaussian_value, AssignParams, Tag};
use tsconv::model::{LevelValues, Positives, TsConvModel, STRIDES};
use tsconv::train::{assign_levels, candidate_positions};

use crate::commands::load_model;
use crate::{CliError, Inspect};

pub struct Request {
    pub what: Inspect,
    pub checkpoint: Option<PathBuf>,
    pub image: PathBuf,
    pub annotations: Option<PathBuf>,
    pub iter: usize,
    pub out: PathBuf,
}

fn write(path: PathBuf, text: String) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn png(path: PathBuf, t: &Tensor) -> Result<(), CliError> {
    save_png(t, &path).map_err(CliError::Data)
}

fn load_scene(req: &Request, cfg: &RunConfig) -> Result<Scene, CliError> {
    let image = load_png(&req.image).map_err(CliError::Data)?;
    let mut objects = Vec::new();
    if let Some(path) = &req.annotations {
        for r in parse_dota(path, &cfg.classes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))? {
            let class = cfg.classes.iter().position(|c| *c == r.class).expect("parser checks categories");
            objects.push(SceneObject { polygon: r.polygon, class, difficult: r.difficult, flagged: r.flagged });
        }
    }
    Ok(Scene { image, objects, flagged: false })
}

fn model_for(req: &Request, cfg: &RunConfig) -> Result<TsConvModel, CliError> {
    match &req.checkpoint {
        Some(dir) => load_model(dir, cfg),
        None => Ok(TsConvModel::new(cfg.model.clone(), cfg.seed)),
    }
}

fn need_annotations(req: &Request) -> Result<(), CliError> {
    match req.annotations {
        Some(_) => Ok(()),
        None => Err(CliError::Usage("this dump needs --annotations".into())),
    }
}

pub fn run(cfg: &RunConfig, req: &Request) -> Result<(), CliError> {
    let scene = load_scene(req, cfg)?;
    fs::create_dir_all(&req.out).map_err(|e| CliError::Data(format!("{}: {e}", req.out.display())))?;
    match req.what {
        Inspect::Gaussian => gaussian(req, &scene),
        Inspect::Assignment => assignment(req, cfg, &scene),
        Inspect::LocPoints => points(req, cfg, &scene, true),
        Inspect::ClsPoints => points(req, cfg, &scene, false),
        Inspect::Dck => dck(req, cfg, &scene),
    }
}

/// Pixel-resolution heatmap, maximum over objects.
fn gaussian(req: &Request, scene: &Scene) -> Result<(), CliError> {
    need_annotations(req)?;
    let rects = scene
        .objects
        .iter()
        .map(|o| merect_of(&o.polygon).map_err(|e| CliError::Data(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let (w, h) = (scene.image.width(), scene.image.height());
    let heat = Tensor::grid_from_fn(w, h, 1, |x, y, _| {
        let p = tsconv::geometry::Point::new(x as f64 + 0.5, y as f64 + 0.5);
        rects.iter().map(|r| gaussian_value(r, p)).fold(0.0, f64::max)
    });
    png(req.out.join("gaussian.png"), &heat)?;
    let mut csv = String::from("object,cx,cy,long,short,angle\n");
    for (i, r) in rects.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{},{},{}", r.center.x, r.center.y, r.long, r.short, r.angle);
    }
    write(req.out.join("gaussian.csv"), csv)
}

fn assignment(req: &Request, cfg: &RunConfig, scene: &Scene) -> Result<(), CliError> {
    need_annotations(req)?;
    let model = model_for(req, cfg)?;
    let targets = encode_targets(scene, &model.config);
    let tape = Tape::new();
    let cands = candidate_positions(&targets, cfg.t);
    let fwd = model.forward(&tape, &scene.image, Positives::Given(&cands)).map_err(|e| CliError::Data(e.to_string()))?;
    let values = fwd.values(model.config.num_classes);
    let prm = AssignParams { t: cfg.t, theta: cfg.theta, iter: req.iter, iter_max: cfg.iterations.max(1) };
    let maps = assign_levels(&values, &targets, cfg.assigner, prm);
    let tags = [Tag::Positive, Tag::SoftNegative, Tag::Ignored, Tag::Negative];
    let mut summary = String::from("level,positive,soft_negative,ignored,negative,total\n");
    for (li, map) in maps.iter().enumerate() {
        write(req.out.join(format!("assignment_l{li}.csv")), map.to_csv())?;
        let shade = |t: Tag| match t {
            Tag::Positive => 1.0,
            Tag::SoftNegative => 0.5,
            Tag::Ignored => 0.25,
            Tag::Negative => 0.0,
        };
        let img = Tensor::grid_from_fn(map.width, map.height, 1, |x, y, _| shade(map.tags[y * map.width + x]));
        png(req.out.join(format!("assignment_l{li}.png")), &img)?;
        let counts: Vec<String> = tags.iter().map(|t| map.count(*t).to_string()).collect();
        let _ = writeln!(summary, "{li},{},{}", counts.join(","), map.len());
    }
    print!("{summary}");
    write(req.out.join("assignment_summary.csv"), summary)
}

fn predict(req: &Request, cfg: &RunConfig, scene: &Scene) -> Result<Vec<LevelValues>, CliError> {
    let model = model_for(req, cfg)?;
    if model.config.head == tsconv::model::HeadKind::Plain {
        return Err(CliError::Usage("the plain head has no sampling plans".into()));
    }
    model.predict(&scene.image).map_err(|e| CliError::Data(e.to_string()))
}

/// Nine rows per positive position.
fn points(req: &Request, cfg: &RunConfig, scene: &Scene, loc: bool) -> Result<(), CliError> {
    let levels = predict(req, cfg, scene)?;
    let mut csv = String::from("level,cell_x,cell_y,tap,x,y,modulation\n");
    for (li, lv) in levels.iter().enumerate() {
        for &pos in &lv.positives {
            let (pts, m) = if loc {
                let p = lv.loc_plan(pos).expect("positive has a plan");
                (p.points, p.modulation)
            } else {
                let p = lv.cls_plan(pos).expect("positive has a plan");
                (p.points, p.modulation)
            };
            let (cx, cy) = (pos % lv.frame.width, pos / lv.frame.width);
            for (j, p) in pts.iter().enumerate() {
                let _ = writeln!(csv, "{li},{cx},{cy},{j},{},{},{}", p.x, p.y, m[j]);
            }
        }
    }
    let name = if loc { "loc_points.csv" } else { "cls_points.csv" };
    write(req.out.join(name), csv)
}

/// Orientation weights and the channel-averaged fused kernels per level.
fn dck(req: &Request, cfg: &RunConfig, scene: &Scene) -> Result<(), CliError> {
    let levels = predict(req, cfg, scene)?;
    let model = model_for(req, cfg)?;
    let base = model.params.get("head.cs_kernel.w").expect("tsconv head has a classification kernel").clone();
    let mut csv = String::from("level,stride,orientation,beta,tap,mean_weight\n");
    for (li, lv) in levels.iter().enumerate() {
        let (Some(lambda), Some(beta)) = (&lv.lambda, &lv.beta) else { continue };
        let bank = DckBank {
            base: base.clone(),
            lambda: std::array::from_fn(|i| lambda[i]),
            beta: std::array::from_fn(|i| beta[i]),
        };
        let per_tap = base.len() / 9;
        let mut kernels: Vec<(String, Tensor)> = (0..8).map(|k| (k.to_string(), bank.fused(k))).collect();
        kernels.push(("effective".into(), bank.effective()));
        for (k, (label, t)) in kernels.iter().enumerate() {
            let b = if k < 8 { beta[k].to_string() } else { String::new() };
            for tap in 0..9 {
                let mean = t.data()[tap * per_tap..(tap + 1) * per_tap].iter().sum::<f64>() / per_tap as f64;
                let _ = writeln!(csv, "{li},{},{label},{b},{tap},{mean}", STRIDES[li]);
            }
        }
        let _ = writeln!(csv, "# level {li} lambda {}", lambda.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
    }
    write(req.out.join("dck.csv"), csv)
}
