use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use tsconv::config::RunConfig;
use tsconv::data::{read_dataset, write_dataset, Scene};
use tsconv::losses::LossReport;
use tsconv::model::{load_checkpoint, save_checkpoint, TsConvModel};
use tsconv::train::{evaluate_model, synth_dataset, TrainError, Trainer};

use crate::{CliError, Common};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const EVAL_FILE: &str = "eval.tsv";
pub const CONFIG_FILE: &str = "config.txt";
pub const DUMP_FILE: &str = "nonfinite_dump.txt";

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
            RunConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// The configured dataset, or synthetic scenes from the seed.
pub fn load_scenes(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Scene>, CliError> {
    match data.or(cfg.data.as_deref()) {
        Some(dir) => read_dataset(dir, &cfg.classes).map_err(|e| io(dir, e)),
        None => Ok(synth_dataset(cfg)),
    }
}

pub fn load_model(dir: &Path, cfg: &RunConfig) -> Result<TsConvModel, CliError> {
    let model = load_checkpoint(dir, None).map_err(|e| io(dir, e))?;
    if model.config.num_classes != cfg.classes.len() {
        return Err(CliError::Data(format!(
            "checkpoint predicts {} classes, configuration names {}",
            model.config.num_classes,
            cfg.classes.len()
        )));
    }
    Ok(model)
}

fn eval_row(iter: usize, model: &TsConvModel, scenes: &[Scene], cfg: &RunConfig) -> Result<String, CliError> {
    let r = evaluate_model(model, scenes, cfg.conf_thresh, cfg.nms_iou).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(format!("{iter}\t{}\t{}\t{}\t{}\n", r.map50, r.map75, r.map50_95, r.mean_matched_iou))
}

pub fn train(cfg: &RunConfig, init: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let scenes = load_scenes(cfg, None)?;
    let model = match init {
        Some(dir) => load_checkpoint(dir, Some(&cfg.model)).map_err(|e| io(dir, e))?,
        None => TsConvModel::new(cfg.model.clone(), cfg.seed),
    };
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text()).map_err(|e| io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| io(&metrics_path, e))?);
    writeln!(metrics, "{}", LossReport::HEADER).map_err(|e| io(&metrics_path, e))?;
    let mut evals = String::from("iter\tmap50\tmap75\tmap50_95\tmean_iou\n");

    let mut trainer = Trainer::with_model(cfg.clone(), scenes.clone(), model);
    let mut failure: Option<CliError> = None;
    let res = trainer.run(|iter, report, model| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = writeln!(metrics, "{}", report.line(iter)) {
            failure = Some(io(&metrics_path, e));
            return;
        }
        let done = iter + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let dir = out.join("checkpoints").join(format!("iter_{done:06}"));
            if let Err(e) = save_checkpoint(model, &dir) {
                failure = Some(io(&dir, e));
            }
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            match eval_row(done, model, &scenes, cfg) {
                Ok(row) => evals.push_str(&row),
                Err(e) => failure = Some(e),
            }
        }
    });
    metrics.flush().map_err(|e| io(&metrics_path, e))?;
    if let Some(e) = failure {
        return Err(e);
    }
    match res {
        Ok(()) => {}
        Err(TrainError::NonFinite { iter, image, dump }) => {
            let path = out.join(DUMP_FILE);
            fs::write(&path, &dump).map_err(|e| io(&path, e))?;
            return Err(CliError::Numeric(format!(
                "non-finite loss at iteration {iter}, image {image}; scores dumped to {}",
                path.display()
            )));
        }
        Err(e) => return Err(CliError::Data(e.to_string())),
    }
    if cfg.eval_every > 0 {
        fs::write(out.join(EVAL_FILE), evals).map_err(|e| io(out, e))?;
    }
    let dir = out.join("checkpoint");
    save_checkpoint(&trainer.model, &dir).map_err(|e| io(&dir, e))?;
    println!("trained {} iterations on {} images; checkpoint {}", cfg.iterations, scenes.len(), dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, conf: Option<f64>) -> Result<String, CliError> {
    let model = load_model(checkpoint, cfg)?;
    let scenes = load_scenes(cfg, data)?;
    let conf = conf.unwrap_or(cfg.conf_thresh);
    if !(0.0..=1.0).contains(&conf) {
        return Err(CliError::Usage(format!("--conf {conf} outside [0, 1]")));
    }
    let r = evaluate_model(&model, &scenes, conf, cfg.nms_iou).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(r.to_text(&cfg.classes))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scenes = synth_dataset(cfg);
    write_dataset(out, &scenes, &cfg.classes).map_err(|e| io(out, e))?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}
