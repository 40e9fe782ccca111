use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use derprop_core::io::{read_tensor, write_tensor};
use derprop_core::Tensor;
use derprop_train::TrainConfig;

fn derprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_derprop")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn rectify_identity_fixture_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let (l, v, out) = (dir.path().join("l.dpt"), dir.path().join("v.dpt"), dir.path().join("out.dpt"));
    // A single constant pixel column of unit L2 norm: S = [1], Δ¹S = [0].
    let logits = Tensor::matrix(3, 1, vec![2.5, -0.75, 0.0]).unwrap();
    write_tensor(&l, &logits).unwrap();
    write_tensor(&v, &Tensor::matrix(4, 1, vec![0.5; 4]).unwrap()).unwrap();
    let o = derprop(&["rectify", "--logits", path(&l), "--features", path(&v), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&l).unwrap());
}

#[test]
fn rectify_blend_start_returns_previous_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let (l, v, p, out) = (
        dir.path().join("l.dpt"),
        dir.path().join("v.dpt"),
        dir.path().join("p.dpt"),
        dir.path().join("out.dpt"),
    );
    write_tensor(&l, &Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap()).unwrap();
    write_tensor(&v, &Tensor::matrix(3, 2, vec![0.2, 0.5, 0.3, -0.25, 0.5, 0.25]).unwrap()).unwrap();
    write_tensor(&p, &Tensor::matrix(2, 2, vec![0.75, 0.125, 0.25, 0.875]).unwrap()).unwrap();
    let args = ["rectify", "--logits", path(&l), "--features", path(&v), "--out", path(&out), "--prev", path(&p)];
    let o = derprop(&[&args[..], &["--blend", "0", "10"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_tensor(&out).unwrap(), read_tensor(&p).unwrap());

    let o = derprop(&[&args[..], &["--blend", "4", "10"]].concat());
    assert!(o.status.success());
    let mixed = read_tensor(&out).unwrap();
    for j in 0..2 {
        assert!((mixed.column(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(derprop(&["verify", "--bogus"]).status.code(), Some(2));
    assert_eq!(derprop(&["verify", "--lemma1", "--thm2"]).status.code(), Some(2));
    assert_eq!(derprop(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.dpt");
    let o = derprop(&["rectify", "--logits", path(&missing), "--features", path(&missing), "--out", path(&missing)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn demo_prints_the_half_root_two_literal_twice() {
    let o = derprop(&["demo", "counterexample"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let report = text.split("--- json ---").next().unwrap();
    assert_eq!(report.matches("0.7071067811865476").count(), 2, "{report}");
}

#[test]
fn verify_groups_report_and_pass() {
    let o = derprop(&["verify", "--lemma1", "--dim", "6", "--trials", "50"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("1 of 1 reports passed"));
    let json = text.split("--- json ---\n").nth(1).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(parsed[0]["passed"], serde_json::json!(true));
}

#[test]
fn failing_verification_exits_1() {
    // The boundedness check needs D >= 4.
    assert_eq!(derprop(&["verify", "--thm2", "--dim", "3", "--trials", "5"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let o = derprop(&["gradcheck", "--trials", "5", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn train_rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let mut value = serde_json::to_value(TrainConfig::default()).unwrap();
    value["epochz"] = serde_json::json!(3);
    fs::write(&cfg, value.to_string()).unwrap();
    let o = derprop(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn compare_ops_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let small = TrainConfig {
        height: 8,
        width: 8,
        train_scenes: 2,
        val_scenes: 1,
        epochs: 1,
        labeled_fraction: 0.5,
        ..TrainConfig::default()
    };
    fs::write(&cfg, serde_json::to_string(&small).unwrap()).unwrap();
    let o = derprop(&["compare-ops", "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    for v in ["forward", "central", "summation", "second_central"] {
        assert!(text.contains(v), "{text}");
    }
}
