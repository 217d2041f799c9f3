use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
patch_size = 32
patch_overlap = 16
tile = 32
tile_overlap = 8

[style]
num_epochs = 2
decay_epoch = 1
batch_size = 1
steps_per_epoch = 2

[daug]
epochs = 1
batch_size = 2
steps_per_epoch = 2

[synth.layout]
size = 64
"#;

fn daugnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daugnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = daugnet(args);
    assert!(
        out.status.success(),
        "daugnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = daugnet(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth-data", "train-style", "extend-domains", "train-daugnet", "evaluate", "standardize"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn unknown_subcommand_is_named() {
    let out = daugnet(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicate"));
}

#[test]
fn training_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = daugnet(&["train-style", "--data", s(dir.path()), "--out", s(&dir.path().join("x.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn missing_dataset_is_reported() {
    let out = daugnet(&["evaluate", "--data", "/nonexistent/data", "--checkpoint", "/nonexistent.ckpt", "--out", "r.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/data"));
}

#[test]
fn full_synthetic_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    let style = root.join("style.ckpt");
    let style_again = root.join("style2.ckpt");
    let extended = root.join("extended.ckpt");
    let classifier = root.join("classifier.ckpt");
    let report = root.join("report.json");
    let c = s(&cfg);

    ok(&["synth-data", "--config", c, "--out", s(&data)]);
    ok(&["extract-patches", "--config", c, "--data", s(&data), "--out", s(&root.join("patches"))]);
    ok(&["train-style", "--config", c, "--data", s(&data), "--domains", "alpha,beta", "--out", s(&style)]);
    ok(&["train-style", "--config", c, "--data", s(&data), "--domains", "alpha,beta", "--out", s(&style_again)]);
    assert_eq!(std::fs::read(&style).unwrap(), std::fs::read(&style_again).unwrap());

    ok(&[
        "extend-domains", "--config", c, "--data", s(&data), "--checkpoint", s(&style), "--domains", "gamma",
        "--out", s(&extended),
    ]);
    ok(&[
        "stylize", "--checkpoint", s(&extended), "--input", s(&data.join("alpha/image.png")), "--style", "gamma",
        "--out", s(&root.join("alpha_as_gamma.png")),
    ]);
    ok(&["train-daugnet", "--config", c, "--data", s(&data), "--checkpoint", s(&extended), "--out", s(&classifier)]);
    ok(&["evaluate", "--config", c, "--data", s(&data), "--checkpoint", s(&classifier), "--out", s(&report)]);
    ok(&[
        "predict", "--config", c, "--checkpoint", s(&classifier), "--input", s(&data.join("gamma/image.png")),
        "--out", s(&root.join("pred")),
    ]);
    ok(&["standardize", "--data", s(&data), "--method", "gray-world", "--out", s(&root.join("gw"))]);

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let domains = json["domains"].as_array().unwrap();
    assert_eq!(domains.len(), 3);
    for d in domains {
        let classes: Vec<&str> = d["classes"].as_array().unwrap().iter().map(|c| c["class"].as_str().unwrap()).collect();
        assert_eq!(classes, ["building", "road", "tree"]);
        assert!(d["classes"].as_array().unwrap().iter().all(|c| c["iou"].is_number()));
    }
    assert!(root.join("pred/mask_road.png").is_file());
    assert!(root.join("patches/census.json").is_file());
}
