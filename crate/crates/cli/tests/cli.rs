use std::path::Path;
use std::process::{Command, Output};

fn c3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3"))
        .args(args)
        .env("C3_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "stream": {"k": 3, "n": 1, "train_size": 4, "valid_size": 2, "test_size": 2, "seed": 5},
        "prompt_len": 2,
        "teacher": "small",
        "train": {"max_epochs": 2, "eval_interval": 1, "max_decode_len": 12},
        "teacher_train": {"max_epochs": 2, "eval_interval": 1, "max_decode_len": 12}
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_stream_writes_loadable_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    let o = c3(&["gen-stream", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stream = c3_core::taskstream::load_stream(&out).unwrap();
    assert_eq!(stream.len(), 8);

    let ordered = dir.path().join("o.json");
    let o = c3(&[
        "gen-stream",
        "--ordered",
        "--seed",
        "2",
        "--out",
        ordered.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(c3_core::taskstream::load_stream(&ordered).unwrap().len(), 6);
}

#[test]
fn run_then_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("res");
    let o = c3(&[
        "run",
        "--config",
        &cfg,
        "--method",
        "peft",
        "--seed",
        "0",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.json",
        "matrix.csv",
        "curves.csv",
        "summary.csv",
        "peft_order1/predictions.jsonl",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = c3(&["report", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches("[matches]").count(), 2, "{text}");

    let dump = out.join("peft_order0/predictions.jsonl");
    let o = c3(&[
        "report",
        dump.to_str().unwrap(),
        "--k",
        "3",
        "--method",
        "peft",
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"md\": 0.0"));
}

#[test]
fn tampered_metrics_are_reported_as_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("res");
    assert!(c3(&[
        "run",
        "--config",
        &cfg,
        "--method",
        "fine-tune",
        "--seed",
        "0",
        "--out",
        out.to_str().unwrap()
    ])
    .status
    .success());
    let path = out.join("metrics.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let ta = v["runs"][0]["report"]["ta"].as_f64().unwrap();
    v["runs"][0]["report"]["ta"] = serde_json::json!(ta + 1.0);
    std::fs::write(&path, v.to_string()).unwrap();
    let o = c3(&["report", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("MISMATCH"));
}

#[test]
fn sweep_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sw");
    let o = c3(&[
        "sweep",
        "--config",
        &cfg,
        "--method",
        "peft",
        "--seed",
        "0",
        "--axis",
        "prompt-length",
        "--values",
        "1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bad_input_fails_with_a_diagnostic() {
    let o = c3(&["run", "--method", "lora", "--out", "/tmp/never"]);
    assert!(!o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"prompt_len": 0}"#).unwrap();
    let o = c3(&[
        "run",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = c3(&["report", dir.path().join("bad.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "single dump needs --k");
}
