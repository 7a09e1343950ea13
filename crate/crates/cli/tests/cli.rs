use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tsconv::data::{default_classes, load_png, read_dataset};
use tsconv::model::{load_checkpoint, save_checkpoint, ModelConfig, TsConvModel};

fn tsconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsconv")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth(dir: &Path, scenes: usize) {
    let scenes = format!("scenes={scenes}");
    let out = tsconv(&["synth", "--seed", "3", "--set", &scenes, "--out", s(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_iterations_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsconv(&["train", "--seed", "5", "--set", "iterations=0", "--set", "scenes=2", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = load_checkpoint(&dir.path().join("checkpoint"), None).unwrap();
    assert_eq!(model, TsConvModel::new(ModelConfig::default(), 5));
    let metrics = fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn training_is_replayable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = tsconv(&[
            "train", "--seed", "2", "--set", "iterations=6", "--set", "scenes=3", "--set", "batch=2",
            "--set", "checkpoint_every=3", "--set", "eval_every=3", "--out", s(d.path()),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "metrics.tsv"), read(&b, "metrics.tsv"));
    assert_eq!(read(&a, "eval.tsv"), read(&b, "eval.tsv"));
    let metrics = String::from_utf8(read(&a, "metrics.tsv")).unwrap();
    assert!(metrics.starts_with("iter\tloss_total"));
    assert_eq!(metrics.lines().count(), 7);
    assert!(a.path().join("checkpoints/iter_000003/params.bin").exists());
    assert!(a.path().join("checkpoints/iter_000006/manifest.txt").exists());
    assert_eq!(read(&a, "checkpoint/params.bin"), read(&a, "checkpoints/iter_000006/params.bin"));
}

#[test]
fn eval_is_deterministic_and_respects_confidence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 3);
    let run = dir.path().join("run");
    assert_eq!(code(&tsconv(&["train", "--set", "iterations=0", "--out", s(&run)])), 0);
    let ckpt = run.join("checkpoint");
    let first = tsconv(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let second = tsconv(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.stdout, second.stdout);

    let strict = stdout(&tsconv(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--conf", "0.99"]));
    let map_line = strict.lines().find(|l| l.starts_with("mAP\t")).expect("mAP row");
    assert!(map_line.starts_with("mAP\t-\t-\t0.0000\t0.0000"), "{strict}");
}

#[test]
fn eval_on_empty_dataset_reports_the_undefined_convention() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("manifest.txt"), "").unwrap();
    assert!(read_dataset(&data, &default_classes()).unwrap().is_empty());
    let run = dir.path().join("run");
    assert_eq!(code(&tsconv(&["train", "--set", "iterations=0", "--out", s(&run)])), 0);
    let text = stdout(&tsconv(&["eval", "--checkpoint", s(&run.join("checkpoint")), "--data", s(&data)]));
    assert!(text.contains("(undefined)"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("mAP\t-\t-\t1.0000\t1.0000\t1.0000")), "{text}");
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tsconv(&["frobnicate"])), 1);
    assert_eq!(code(&tsconv(&["train", "--set", "no_such_key=1", "--out", s(dir.path())])), 1);
    assert_eq!(code(&tsconv(&["train", "--set", "lr=-1", "--out", s(dir.path())])), 1);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed=1\nwat\n").unwrap();
    assert_eq!(code(&tsconv(&["train", "--config", s(&cfg), "--out", s(dir.path())])), 1);
    let missing = dir.path().join("missing");
    assert_eq!(code(&tsconv(&["eval", "--checkpoint", s(&missing)])), 2);
    assert_eq!(code(&tsconv(&["inspect", "heatmaps", "--image", "x.png"])), 1);
    assert_eq!(code(&tsconv(&["inspect", "dck", "--image", s(&missing)])), 2);
    assert_eq!(code(&tsconv(&["--help"])), 0);
}

#[test]
fn mismatched_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&tsconv(&["train", "--set", "iterations=0", "--out", s(&run)])), 0);
    let out = tsconv(&["eval", "--checkpoint", s(&run.join("checkpoint")), "--set", "classes=a,b"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn non_finite_loss_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let init = dir.path().join("init");
    let mut model = TsConvModel::new(ModelConfig::default(), 0);
    for (name, t) in model.params.iter_mut() {
        if name == "backbone.c1.b" {
            t.data_mut()[0] = f64::NAN;
        }
    }
    save_checkpoint(&model, &init).unwrap();
    let run = dir.path().join("run");
    let out = tsconv(&["train", "--init", s(&init), "--set", "iterations=3", "--set", "scenes=2", "--out", s(&run)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let dump = fs::read_to_string(run.join("nonfinite_dump.txt")).unwrap();
    assert!(!dump.is_empty());
}

#[test]
fn init_checkpoint_must_match_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let init = dir.path().join("init");
    save_checkpoint(&TsConvModel::new(ModelConfig { feat: 8, ..ModelConfig::default() }, 0), &init).unwrap();
    let out = tsconv(&["train", "--init", s(&init), "--set", "iterations=1", "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn inspect_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 1);
    let img = data.join("0000.png");
    let ann = data.join("0000.txt");
    let out = dir.path().join("out");
    let run = |what: &str| {
        let o = tsconv(&["inspect", what, "--image", s(&img), "--annotations", s(&ann), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{what}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };

    run("gaussian");
    let heat = load_png(&out.join("gaussian.png")).unwrap();
    let csv = fs::read_to_string(out.join("gaussian.csv")).unwrap();
    let centers: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[1], v[2])
        })
        .collect();
    let (mut best, mut at) = (-1.0, (0, 0));
    for y in 0..heat.height() {
        for x in 0..heat.width() {
            if heat.at(x, y, 0) > best {
                best = heat.at(x, y, 0);
                at = (x, y);
            }
        }
    }
    let (px, py) = (at.0 as f64 + 0.5, at.1 as f64 + 0.5);
    assert!(centers.iter().any(|(cx, cy)| (cx - px).hypot(cy - py) <= 1.0), "peak at {at:?}, centers {centers:?}");

    let summary = stdout(&run("assignment"));
    for line in summary.lines().skip(1) {
        let v: Vec<usize> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[1] + v[2] + v[3] + v[4], v[5]);
    }

    run("loc-points");
    let loc = fs::read_to_string(out.join("loc_points.csv")).unwrap();
    let rows: Vec<&str> = loc.lines().skip(1).collect();
    assert!(!rows.is_empty() && rows.len() % 9 == 0);
    run("cls-points");
    assert_eq!(fs::read_to_string(out.join("cls_points.csv")).unwrap().lines().count() - 1, rows.len());

    run("dck");
    let dck = fs::read_to_string(out.join("dck.csv")).unwrap();
    assert_eq!(dck.lines().filter(|l| l.starts_with("0,8,effective")).count(), 9);

    // deterministic
    let before = fs::read(out.join("loc_points.csv")).unwrap();
    run("loc-points");
    assert_eq!(before, fs::read(out.join("loc_points.csv")).unwrap());
}
