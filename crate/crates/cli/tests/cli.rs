use std::path::Path;
use std::process::{Command, Output};

use can_cli::plot::embedded_rows;
use serde_json::Value;

fn can(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_can"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A one- or two-step run on a small synthetic set.
const QUICK: &[&str] = &[
    "--image",
    "16",
    "--synthetic-side",
    "16",
    "--synthetic-count",
    "96",
    "--batch-size",
    "16",
    "--log-wall-time",
    "false",
];

fn pretrain(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--out", out.to_str().unwrap()];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    can(&args)
}

fn resolved(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("config.resolved")).unwrap()
}

#[test]
fn mae_preset_forces_degenerate_weights() {
    let dir = tempfile::tempdir().unwrap();
    let o = pretrain(dir.path(), &["--method", "mae", "--max-steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = resolved(dir.path());
    for line in [
        "train.method = mae",
        "train.lambda_infonce = 0.0",
        "train.lambda = 1.0",
        "train.views_per_image = 1",
        "train.sigma_max = 0.0",
    ] {
        assert!(cfg.lines().any(|l| l == line), "{line} missing:\n{cfg}");
    }
}

#[test]
fn high_mask_rate_keeps_six_of_sixty_four() {
    let dir = tempfile::tempdir().unwrap();
    let o = can(&[
        "pretrain",
        "--out",
        dir.path().to_str().unwrap(),
        "--mask-rate",
        "0.9",
        "--synthetic-count",
        "40",
        "--batch-size",
        "8",
        "--max-steps",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("T = 64, T' = 6"), "{}", stdout(&o));
}

#[test]
fn missing_dataset_path_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pretrain(dir.path(), &["--source", "cifar10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.path"), "{}", stderr(&o));
    assert!(!dir.path().join("config.resolved").exists());
}

#[test]
fn every_bad_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = pretrain(dir.path(), &["--mask-rate", "1.5", "--tau", "-1", "--no-such-key", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for key in ["train.mask_rate", "train.tau", "no-such-key"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(pretrain(a.path(), &["--max-steps", "2"]).status.success());
    let cfg = a.path().join("config.resolved");
    let o = can(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics(a.path()), metrics(b.path()));
}

fn trained(dir: &Path) -> std::path::PathBuf {
    let o = pretrain(dir, &["--max-steps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("checkpoint_00000002.ckpt")
}

fn probe(ckpt: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["probe", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    args.extend_from_slice(QUICK);
    can(&args)
}

#[test]
fn probing_twice_gives_identical_json() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let (j1, j2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert!(probe(&ckpt, &j1, &[]).status.success());
    assert!(probe(&ckpt, &j2, &[]).status.success());
    let text = std::fs::read_to_string(&j1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&j2).unwrap());
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["mode"], "linear");
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn k_shot_report_schema_and_oversized_k() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let json = dir.path().join("k.json");
    let o = probe(&ckpt, &json, &["--k", "10", "--repeats", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["mode"], "k_shot");
    assert_eq!(v["k"], 10);
    assert_eq!(v["R"], 4);
    assert!(v["mean"].is_f64() && v["std"].is_f64());
    assert_eq!(v["accuracies"].as_array().unwrap().len(), 4);

    // 76 training images over 4 classes
    let big = dir.path().join("big.json");
    let o = probe(&ckpt, &big, &["--k", "500"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--k 500 exceeds"), "{}", stderr(&o));
    assert!(!big.exists());
}

#[test]
fn plotting_an_empty_csv_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    std::fs::write(&csv, "").unwrap();
    let svg = dir.path().join("out.svg");
    let o = can(&["plot", "loss", "--input", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!svg.exists());
}

#[test]
fn malformed_csv_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    std::fs::write(&csv, "method,mask_rate,accuracy\ncan,0.5,0.61\ncan,zero,0.4\n").unwrap();
    let svg = dir.path().join("out.svg");
    let o = can(&["plot", "mask-sweep", "--input", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!svg.exists());
}

#[test]
fn mask_sweep_has_one_curve_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let mut text = String::from("method,mask_rate,accuracy\n");
    for (m, base) in [("can", 0.6), ("simclr", 0.55)] {
        for r in [0.0, 0.25, 0.5, 0.75] {
            text.push_str(&format!("{m},{r},{}\n", base - 0.1 * r));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let svg_path = dir.path().join("sweep.svg");
    let o = can(&["plot", "mask-sweep", "--input", csv.to_str().unwrap(), "--out", svg_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("Masking rate") && svg.contains("Linear probe accuracy"));
}

#[test]
fn flops_csv_round_trips_through_plot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flops.csv");
    let o = can(&[
        "flops",
        "--mask-rates",
        "0.25,0.5,0.75",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows = can_core::cost::parse_csv(&text).unwrap();
    // 4 models x (3 CAN rates + SimCLR + MAE)
    assert_eq!(rows.len(), 20);

    let svg_path = dir.path().join("flops.svg");
    let o = can(&["plot", "flops", "--input", csv.to_str().unwrap(), "--out", svg_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut plotted = embedded_rows(&std::fs::read_to_string(&svg_path).unwrap());
    plotted.sort_unstable();
    let mut lines: Vec<String> = text.lines().skip(1).map(String::from).collect();
    lines.sort_unstable();
    assert_eq!(plotted, lines);
}

#[test]
fn flops_rejects_unknown_models() {
    let o = can(&["flops", "--models", "vit-q"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vit-q"));
}
