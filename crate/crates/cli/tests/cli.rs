use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 2

[synthetic.cir]
n = 80

[reservoir]
p = 4
m = 3

[gem]
max_iters = 3
";

fn urs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urs")).args(args).output().unwrap()
}

fn ok(out: Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_bundle_and_market_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("sim");
    let v = ok(urs(&["simulate", "--config", &cfg, "--out-dir", s(&out)]));
    assert_eq!(v["n"], 80);
    assert_eq!(v["kappa_v"], 0.01);
    for f in [
        "dataset/manifest.json",
        "market/options.csv",
        "market/spot.csv",
        "market/rates.csv",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn train_and_forecast_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(urs(&[
            "train-offline",
            "--config",
            &cfg,
            "--out-dir",
            s(&out),
            "--jobs",
            "1",
        ]));
        let ckpt = out.join("checkpoint.json");
        ok(urs(&["forecast", "--checkpoint", s(&ckpt), "--out-dir", s(&out)]));
        let v = ok(urs(&["evaluate", "--checkpoint", s(&ckpt), "--out-dir", s(&out)]));
        assert_eq!(v["models"][0]["model"], "urs");
        files.push(
            ["checkpoint.json", "trajectory.csv", "forecast.csv", "table.csv"].map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert!(files[0] == files[1]);
    let table = String::from_utf8(files[0][3].clone()).unwrap();
    assert_eq!(table.lines().next().unwrap(), "model,k=1,k=5,k=10,k=15,k=20");
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn market_flags_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let sim = dir.path().join("sim");
    ok(urs(&["simulate", "--config", &cfg, "--out-dir", s(&sim)]));
    let m = sim.join("market");
    let out = dir.path().join("train");
    ok(urs(&[
        "train-online",
        "--config",
        &cfg,
        "--out-dir",
        s(&out),
        "--options",
        s(&m.join("options.csv")),
        "--spot",
        s(&m.join("spot.csv")),
        "--rates",
        s(&m.join("rates.csv")),
    ]));
    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("options.csv"));
    assert!(fs::read_to_string(out.join("trajectory.csv"))
        .unwrap()
        .contains("spectral_radius"));
}

#[test]
fn flags_override_the_file_and_the_resolved_config_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("sim");
    ok(urs(&[
        "simulate",
        "--config",
        &cfg,
        "--seed",
        "9",
        "--out-dir",
        s(&out),
    ]));
    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    let doc: toml::Table = resolved.parse().unwrap();
    assert_eq!(doc["seed"].as_integer(), Some(9));
    assert_eq!(doc["reservoir"]["seed"].as_integer(), Some(9));
    assert_eq!(doc["synthetic"]["cir"]["n"].as_integer(), Some(80));
}

#[test]
fn invalid_config_exits_2_listing_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "initial_var = -1.0\n[reservoir]\np = 0\n[eval]\nband_level = 2.0\n",
    );
    let out = urs(&["simulate", "--config", &cfg, "--out-dir", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["details"].as_array().unwrap().len() >= 3, "{err}");
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "sed = 3\n");
    assert_eq!(urs(&["simulate", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = urs(&[
        "train-offline",
        "--dataset",
        s(&dir.path().join("nowhere")),
        "--out-dir",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].is_string());
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = urs(&["forecast", "--checkpoint", s(&dir.path().join("none.json"))]);
    assert_eq!(out.status.code(), Some(3));
}
