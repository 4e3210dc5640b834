use std::path::Path;
use std::process::{Command, Output};

fn dst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dst"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dst(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dst(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dst(&[]).status.code(), Some(1));
    assert_eq!(
        dst(&["evaluate", "--pred", "x.json"]).status.code(),
        Some(1)
    );
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.json");
    let code = dst(&[
        "infer",
        "--baseline",
        "--data",
        p(&dir.path().join("nope")),
        "--out",
        p(&out),
    ])
    .status
    .code();
    assert_eq!(code, Some(2));
}

#[test]
fn noiseless_baseline_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, noisy, pred) = (
        dir.path().join("gt"),
        dir.path().join("noisy"),
        dir.path().join("pred.json"),
    );
    ok(&[
        "simulate",
        "--games",
        "2",
        "--frames",
        "1500",
        "--seed",
        "3",
        "--out",
        p(&gt),
    ]);
    ok(&[
        "corrupt",
        "--in",
        p(&gt),
        "--noise",
        "zero",
        "--out",
        p(&noisy),
    ]);
    ok(&[
        "infer",
        "--baseline",
        "--data",
        p(&noisy),
        "--out",
        p(&pred),
    ]);
    let report = dir.path().join("report.json");
    let text = ok(&[
        "evaluate",
        "--pred",
        p(&pred),
        "--gt",
        p(&gt),
        "--delta",
        "12",
        "--threshold",
        "0.15",
        "--json",
        p(&report),
    ]);
    let overall = text.lines().find(|l| l.starts_with("overall")).unwrap();
    assert!(overall.contains("100.0   100.0"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["delta_12"]["baseline"]["overall"]["pr"], 1.0);
}

#[test]
fn train_infer_ablate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (gt, noisy, ckpt) = (root.join("gt"), root.join("noisy"), root.join("ckpt"));
    ok(&[
        "simulate",
        "--games",
        "2",
        "--frames",
        "1000",
        "--out",
        p(&gt),
    ]);
    ok(&["corrupt", "--in", p(&gt), "--out", p(&noisy)]);
    let config = root.join("config.json");
    std::fs::write(
        &config,
        r#"{"model": {"n_encoder_layers": 1, "n_decoder_layers": 1, "heads": 2, "d_model": 16, "context": 100, "dropout": 0.1, "ff_mult": 2},
            "train": {"epochs": 2, "lr_drop_epoch": 1, "windows_per_game": 4, "batch_size": 4}}"#,
    )
    .unwrap();
    let log = ok(&[
        "train",
        "--data",
        p(&noisy),
        "--config",
        p(&config),
        "--game-state",
        "off",
        "--L",
        "50",
        "--out",
        p(&ckpt),
    ]);
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1]["loss"]["total"].as_f64().unwrap().is_finite());
    assert!(ckpt.join("manifest.json").exists());

    let (a, b) = (root.join("a.json"), root.join("b.json"));
    ok(&[
        "infer",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&noisy),
        "--out",
        p(&a),
    ]);
    ok(&[
        "infer",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&noisy),
        "--out",
        p(&b),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let plan = root.join("plan.json");
    std::fs::write(
        &plan,
        r#"{"test": "noisy", "report": "report.json", "arms": [
            {"name": "baseline", "baseline": true},
            {"name": "dst", "checkpoint": "ckpt"},
            {"name": "absent", "checkpoint": "no-such-ckpt"}]}"#,
    )
    .unwrap();
    let text = ok(&["ablate", "--plan", p(&plan)]);
    assert!(text.contains("delta 25"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert!(json["delta_12"]["absent"].is_null());
    assert!(json["delta_12"]["dst"]["overall"]["tp"].is_u64());
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck", "--instances", "3"]);
    assert!(text.contains("dst_loss"));
    assert!(!text.contains("FAIL"));
}
