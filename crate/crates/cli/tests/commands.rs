use std::path::Path;
use std::process::{Command, Output};

use cgnet_core::data::{synthetic, write_label, Split};
use cgnet_core::render::ErrorMapPalette;

fn cgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    let text = stdout(o);
    let start = text.find('{').unwrap_or_else(|| panic!("no JSON in {text}"));
    serde_json::from_str(&text[start..]).expect("valid JSON")
}

fn write_synthetic(root: &Path) {
    let train = synthetic::synthetic_pairs(3, 32, 1);
    let val: Vec<_> = synthetic::synthetic_pairs(2, 32, 2)
        .into_iter()
        .map(|mut p| {
            p.id = format!("v{}", p.id);
            p
        })
        .collect();
    let test: Vec<_> = synthetic::synthetic_pairs(2, 32, 3)
        .into_iter()
        .map(|mut p| {
            p.id = format!("t{}", p.id);
            p
        })
        .collect();
    synthetic::write_dataset(root, &[(Split::Train, &train), (Split::Val, &val), (Split::Test, &test)], 32).unwrap();
}

#[test]
fn unknown_command_is_a_usage_error() {
    assert_eq!(cgnet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cgnet(&[]).status.code(), Some(2));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let o = cgnet(&["train", "--data", "synthetic", "--variant", "B-CGM-5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown variant"));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = cgnet(&["train", "--data", "synthetic", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn audit_reports_constructed_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let mut mask = vec![0u8; 1000];
    mask[..100].fill(1);
    std::fs::create_dir_all(dir.path().join("label")).unwrap();
    write_label(&dir.path().join("label").join("a.png"), 25, 40, &mask).unwrap();
    let o = cgnet(&["audit", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("1:9.00"));
    let report = json(&o);
    assert_eq!(report["changed_pixels"], 100);
    assert_eq!(report["unchanged_pixels"], 900);
}

#[test]
fn render_uses_only_palette_colours() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (16, 24);
    let pred: Vec<u8> = (0..h * w).map(|i| ((i * 7) % 3 == 0) as u8).collect();
    let gt: Vec<u8> = (0..h * w).map(|i| ((i * 5) % 4 == 0) as u8).collect();
    let (p, g, out) = (dir.path().join("p.png"), dir.path().join("g.png"), dir.path().join("e.png"));
    write_label(&p, h, w, &pred).unwrap();
    write_label(&g, h, w, &gt).unwrap();
    let o = cgnet(&["render", "--pred", p.to_str().unwrap(), "--gt", g.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let img = image::open(&out).unwrap().to_rgb8();
    let palette = ErrorMapPalette::default().colors();
    let mut seen = std::collections::HashSet::new();
    for px in img.pixels() {
        assert!(palette.contains(&px.0), "{:?}", px.0);
        seen.insert(px.0);
    }
    assert_eq!(seen.len(), 4);
}

#[test]
fn render_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p.png"), dir.path().join("g.png"));
    write_label(&p, 4, 4, &[0; 16]).unwrap();
    write_label(&g, 4, 5, &[0; 20]).unwrap();
    let out = dir.path().join("e.png");
    let o = cgnet(&["render", "--pred", p.to_str().unwrap(), "--gt", g.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_predict_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let runs = tempfile::tempdir().unwrap();
    write_synthetic(data.path());
    let root = data.path().to_str().unwrap();
    let out_dir = runs.path().join("run");
    let cfg = runs.path().join("exp.cfg");
    std::fs::write(&cfg, "epochs = 5\nlr = 0.001\nbatch_size = 2\naugment = false\n").unwrap();
    let o = cgnet(&[
        "train",
        "--data",
        root,
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "2",
        "--scale",
        "0.25",
        "--tile-size",
        "32",
        "--variant",
        "B-CGM-4",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&o);
    // flag beats file, file beats default
    assert_eq!(summary["config"]["max_epochs"], 2);
    assert_eq!(summary["config"]["learning_rate"], 0.001);
    assert_eq!(summary["config"]["batch_size"], 2);
    assert_eq!(summary["variant"], "B-CGM-4");
    assert!(out_dir.join("best").exists());
    let log = std::fs::read_to_string(out_dir.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "main_loss", "aux_loss", "total_loss", "val_f1", "val_iou", "wall_seconds"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    let ck = out_dir.to_str().unwrap();
    let first = cgnet(&["eval", "--checkpoint", ck, "--data", root, "--split", "test"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = cgnet(&["eval", "--checkpoint", ck, "--data", root, "--split", "test"]);
    assert_eq!(stdout(&first), stdout(&second));
    let m = json(&first);
    for key in ["f1", "precision", "recall", "iou", "tp", "tn", "fp", "fn"] {
        assert!(m.get(key).is_some(), "missing {key}");
    }
    assert_eq!(m["tp"].as_u64().unwrap() + m["tn"].as_u64().unwrap() + m["fp"].as_u64().unwrap() + m["fn"].as_u64().unwrap(), 2 * 32 * 32);
    let val = cgnet(&["eval", "--checkpoint", ck, "--data", root, "--split", "val"]);
    let best: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join(format!("{}.json", std::fs::read_to_string(out_dir.join("best")).unwrap().trim()))).unwrap())
            .unwrap();
    assert!((json(&val)["f1"].as_f64().unwrap() - best["val_f1"].as_f64().unwrap()).abs() < 1e-6);
    let human = cgnet(&["eval", "--checkpoint", ck, "--data", root, "--human"]);
    assert!(stdout(&human).starts_with("F1 "));

    let pred_dir = runs.path().join("pred");
    let a = data.path().join("A").join("tsyn0000.png");
    let b = data.path().join("B").join("tsyn0000.png");
    let o = cgnet(&[
        "predict",
        "--checkpoint",
        ck,
        "--t1",
        a.to_str().unwrap(),
        "--t2",
        b.to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mask = image::open(pred_dir.join("tsyn0000.png")).unwrap().to_luma8();
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let (h, w, prob) = cgnet_cli::read_probability(&pred_dir.join("tsyn0000.f32")).unwrap();
    assert_eq!((h, w, prob.len()), (32, 32, 32 * 32));
    for (p, m) in prob.iter().zip(mask.pixels()) {
        assert!((0.0..=1.0).contains(p));
        if (p - 0.5).abs() > 1e-6 {
            assert_eq!(*p > 0.5, m.0[0] == 255);
        }
    }
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let o = cgnet(&["ablate", "--dataset", "synthetic", "--pairs", "2", "--size", "32", "--epochs", "1", "--batch-size", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 8, "{text}");
    for (row, name) in rows.iter().zip(["Base", "B-CGM-4", "B-CGM-3", "B-CGM-2", "B-CGM-4-3", "B-CGM-4-2", "B-CGM-3-2", "CGNet"]) {
        assert_eq!(row.split_whitespace().next(), Some(name));
        let f1: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!((0.0..=100.0).contains(&f1));
    }
}

#[test]
fn bench_reports_timings() {
    let o = cgnet(&["bench", "--pairs", "2", "--size", "32", "--batch-size", "2", "--variant", "Base"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert!(v["seconds_per_epoch"].as_f64().unwrap() > 0.0);
    assert!(v["seconds_per_test_set"].as_f64().unwrap() > 0.0);
    assert_eq!(v["variant"], "Base");
}

#[test]
fn in_process_runner_matches_binary_exit_codes() {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let args: Vec<String> = ["cgnet", "audit", "/definitely/not/here"].iter().map(|s| s.to_string()).collect();
    assert_eq!(cgnet_cli::run_with(&args, &mut out, &mut err), 1);
    assert!(String::from_utf8_lossy(&err).contains("error"));
    let help: Vec<String> = ["cgnet", "--help"].iter().map(|s| s.to_string()).collect();
    assert_eq!(cgnet_cli::run_with(&help, &mut out, &mut err), 0);
}
