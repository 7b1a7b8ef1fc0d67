use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ssg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ssg(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &[
    "--train-scenes",
    "12",
    "--val-scenes",
    "4",
    "--test-scenes",
    "4",
    "--points-min",
    "8",
    "--points-max",
    "16",
];

const TINY_MODEL: &[&str] = &["--hidden", "8", "--point-widths", "4,8", "--epochs", "2"];

/// gen, stats and train in `dir`.
fn pipeline(dir: &Path) {
    ok(dir, &[&["gen", "--out", "corpus", "--seed", "3"], SMALL].concat());
    ok(dir, &["stats", "--data", "corpus/train", "--out", "stats.json"]);
    ok(
        dir,
        &[&["train", "--train-data", "corpus/train", "--val-data", "corpus/val", "--out", "model.ckpt"], TINY_MODEL].concat(),
    );
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_reports_all_headline_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    assert!(d.join("model.history.json").exists());
    let table = ok(d, &["eval", "--data", "corpus/test", "--checkpoint", "model.ckpt", "--stats", "stats.json", "--out", "report.json"]);
    assert!(table.contains("Rel"));
    let report = read_json(d.join("report.json"));
    for key in ["recall_rel", "recall_obj", "recall_pred", "mrecall_obj", "mrecall_pred"] {
        let v = report[key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
}

#[test]
fn unit_alpha_matches_disabled_rescoring() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let eval = |extra: &[&str], out: &str| {
        ok(d, &[&["eval", "--data", "corpus/test", "--checkpoint", "model.ckpt", "--out", out], extra].concat());
        read_json(d.join(out))
    };
    let plain = eval(&["--no-cr"], "plain.json");
    let unit = eval(&["--stats", "stats.json", "--fixed-alpha", "1.0"], "unit.json");
    for key in ["recall_rel", "recall_obj", "recall_pred", "mrecall_obj", "mrecall_pred", "per_class_obj", "per_class_pred"] {
        assert_eq!(plain[key], unit[key], "{key}");
    }
}

#[test]
fn disabled_rescoring_never_reads_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    fs::write(d.join("garbage.json"), "not json").unwrap();
    ok(d, &["eval", "--data", "corpus/test", "--checkpoint", "model.ckpt", "--no-cr", "--stats", "garbage.json"]);
    ok(d, &["eval", "--data", "corpus/test", "--checkpoint", "model.ckpt", "--no-cr", "--stats", "missing.json"]);
    let out = ssg(d, &["eval", "--data", "corpus/test", "--checkpoint", "model.ckpt", "--stats", "garbage.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[parse]:"));
}

#[test]
fn commands_are_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        pipeline(d);
        ok(d, &["eval", "--data", "corpus/test", "--checkpoint", "model.ckpt", "--stats", "stats.json", "--out", "report.json"]);
        ok(d, &["predict", "--scene", "corpus/test/scene_00000.json", "--checkpoint", "model.ckpt", "--stats", "stats.json", "--out", "pred.json"]);
        ok(d, &["ablate-stats", "--stats", "stats.json", "--drop-top-frac", "0.5", "--out", "ablated.json"]);
    }
    for file in [
        "corpus/model.json",
        "corpus/train/manifest.json",
        "corpus/train/scene_00003.json",
        "corpus/train/scene_00003.bin",
        "stats.json",
        "model.ckpt",
        "model.history.json",
        "report.json",
        "pred.json",
        "ablated.json",
    ] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}

#[test]
fn predict_emits_named_nodes_and_both_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let scene = "corpus/test/scene_00001.json";
    ok(d, &["predict", "--scene", scene, "--checkpoint", "model.ckpt", "--stats", "stats.json", "--out", "cr.json"]);
    ok(d, &["predict", "--scene", scene, "--checkpoint", "model.ckpt", "--no-cr", "--out", "plain.json"]);
    let cr = read_json(d.join("cr.json"));
    let plain = read_json(d.join("plain.json"));
    let input = read_json(d.join(scene));
    let nodes = cr["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), input["nodes"].as_array().unwrap().len());
    for n in nodes {
        assert!(n["node_id"].is_string() && n["class"].is_string());
        assert_eq!(n["distribution"], n["refined_distribution"]);
        assert!(n["base_distribution"].is_array());
    }
    for e in cr["edges"].as_array().unwrap() {
        assert!(e["src"].is_string() && e["dst"].is_string() && e["predicate"].is_string());
        assert!(e["base_distribution"].is_array() && e["refined_distribution"].is_array());
    }
    for n in plain["nodes"].as_array().unwrap() {
        assert!(n.get("refined_distribution").is_none());
        let sum: f64 = n["distribution"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_drop_fraction_copies_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &[&["gen", "--out", "corpus"], SMALL].concat());
    ok(d, &["stats", "--data", "corpus/train", "--out", "stats.json"]);
    ok(d, &["ablate-stats", "--stats", "stats.json", "--drop-top-frac", "0", "--out", "same.json"]);
    assert_eq!(read_json(d.join("stats.json")), read_json(d.join("same.json")));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), "train-scenes = 6\nval-scenes = 2\ntest-scenes = 0\nout = from_file\nseed = 9\n").unwrap();
    ok(d, &["gen", "--config", "run.cfg", "--out", "from_flag"]);
    assert!(d.join("from_flag/train").exists());
    assert!(!d.join("from_file").exists());
    let manifest = read_json(d.join("from_flag/train/manifest.json"));
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 6);
    let model = read_json(d.join("from_flag/model.json"));
    assert_eq!(model["config"]["seed"], 9);
}

#[test]
fn failures_print_one_classified_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "hidden = lots\n").unwrap();
    for (args, class) in [
        (vec!["eval", "--data", "nowhere", "--checkpoint", "x.ckpt", "--no-cr"], "error[io]:"),
        (vec!["eval", "--data", "corpus"], "error[config]:"),
        (vec!["train", "--config", "bad.cfg"], "error[config]:"),
        (vec!["stats", "--unknown-flag"], "error[usage]:"),
        (vec!["ablate-stats", "--stats", "s.json", "--out", "o.json", "--drop-top-frac", "x"], "error[config]:"),
    ] {
        let out = ssg(d, &args);
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.lines().count(), 1, "{stderr}");
        assert!(stderr.starts_with(class), "{args:?}: {stderr}");
    }
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &[&["gen", "--out", "corpus"], SMALL].concat());
    fs::write(d.join("bad.ckpt"), b"SSGCKPT1\nshort").unwrap();
    let out = ssg(d, &["eval", "--data", "corpus/test", "--checkpoint", "bad.ckpt", "--no-cr"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[checkpoint]:"));
}
