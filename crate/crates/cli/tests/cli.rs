//! Black-box tests of the command-line surface: flags, exit codes, file
//! formats, round trips.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tokenmark")
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "model": {"vocab_size": 96, "embed_dim": 12, "model_seed": 3, "entropy_mix": [0.2, 0.3, 0.5]},
            "key": {"global_key": 4242, "key_id": "cli-test"},
            "generators": {"hidden_dim": 12, "init_gamma": 0.25, "init_delta": 2.0, "init_seed": 5},
            "generation": {"gen_len": 100, "prompt_len": 6},
            "evaluation": {"config_id": "cli-test", "n_test": 12, "gen_len": 100, "prompt_len": 6,
                            "eval_seed": 9, "sentence_dim": 12, "embedder_seed": 3, "oracle": null},
            "corpus_seed": 55
        })
        .to_string(),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let out = run(&["detect", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage") || text.contains("unexpected"), "stderr: {text}");
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("watermarking"));
}

#[test]
fn missing_input_file_is_runtime_error() {
    let out = run(&["detect", "--in", "/nonexistent/path.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_then_detect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let wm = dir.path().join("wm.jsonl");
    let human = dir.path().join("human.jsonl");
    let threshold_file = dir.path().join("threshold.json");

    let out = run(&["generate", "--config", &cfg, "--count", "8", "--out", wm.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Sidecar carries the key id, never the key value.
    let sidecar = std::fs::read_to_string(dir.path().join("wm.meta.json")).unwrap();
    assert!(sidecar.contains("cli-test"));
    assert!(!sidecar.contains("4242"));

    let out = run(&["corpus", "generate", "--config", &cfg, "--kind", "human", "--count", "60",
                    "--out", human.to_str().unwrap()]);
    assert!(out.status.success());

    let out = run(&["calibrate", "--config", &cfg, "--in", human.to_str().unwrap(),
                    "--fpr", "0.01", "--out", threshold_file.to_str().unwrap()]);
    assert!(out.status.success());
    let threshold: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&threshold_file).unwrap()).unwrap();
    let threshold = threshold["threshold"].as_f64().unwrap();

    // Watermarked records all flagged at the calibrated threshold.
    let report = dir.path().join("report.json");
    let out = run(&["detect", "--config", &cfg, "--in", wm.to_str().unwrap(),
                    "--threshold", &threshold.to_string(), "--out", report.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("WATERMARKED"));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r["verdict"].as_bool().unwrap()));
    assert!(rows.iter().all(|r| r["z"].as_f64().unwrap() > threshold));

    // Human records stay clean at the same threshold.
    let out = run(&["detect", "--config", &cfg, "--in", human.to_str().unwrap(),
                    "--threshold", &threshold.to_string()]);
    assert!(out.status.success());
    let clean = String::from_utf8_lossy(&out.stdout);
    let verdicts = clean.matches("WATERMARKED").count();
    assert!(verdicts <= 1, "expected <= 1 false positives among 60, got {verdicts}");
}

#[test]
fn attack_then_windowed_detect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let wm = dir.path().join("wm.jsonl");
    let hosts = dir.path().join("hosts.jsonl");
    let attacked = dir.path().join("attacked.jsonl");

    assert!(run(&["generate", "--config", &cfg, "--count", "4", "--out", wm.to_str().unwrap()]).status.success());
    assert!(run(&["corpus", "generate", "--config", &cfg, "--kind", "human", "--count", "4",
                  "--length", "300", "--out", hosts.to_str().unwrap()]).status.success());
    let out = run(&["attack", "--config", &cfg, "--kind", "copy-paste", "--k", "3",
                    "--in", wm.to_str().unwrap(), "--human", hosts.to_str().unwrap(),
                    "--out", attacked.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("attacked.meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["kind"], "copy-paste");
    assert_eq!(meta["k"], 3);

    let out = run(&["detect", "--config", &cfg, "--in", attacked.to_str().unwrap(),
                    "--window", "60", "--threshold", "3.5"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("WATERMARKED"));
}

#[test]
fn annotate_json_mode_lists_every_scored_token() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let wm = dir.path().join("wm.jsonl");
    assert!(run(&["generate", "--config", &cfg, "--count", "2", "--out", wm.to_str().unwrap()]).status.success());
    let out = run(&["annotate", "--config", &cfg, "--in", wm.to_str().unwrap(),
                    "--index", "1", "--color", "never"]);
    assert!(out.status.success());
    let rows: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 99);
    let first = &rows[0];
    assert!(first["gamma"].as_f64().unwrap() > 0.0);
    assert!(first["delta"].as_f64().unwrap() > 0.0);
}

#[test]
fn evaluate_emits_report_to_stdout_or_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = run(&["evaluate", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(report["config_id"], "cli-test");
    assert!(report["tpr_at_fpr1"].as_f64().unwrap() >= 0.0);
    assert!(report["buckets"].as_array().map_or(0, |b| b.len()) >= 2);
}

#[test]
fn curves_fits_points_and_exports_csv() {
    let dir = tempfile::tempdir().unwrap();
    let points = dir.path().join("points.json");
    // Concave logistic samples as object form.
    let objs: Vec<serde_json::Value> = (0..10)
        .map(|i| {
            let x = 0.7 + 0.25 * i as f64;
            let y = 1.0 - 0.8 / (1.0 + x * x);
            serde_json::json!({"x": x, "y": y})
        })
        .collect();
    std::fs::write(&points, serde_json::to_string(&objs).unwrap()).unwrap();
    let fit_file = dir.path().join("fit.json");
    let csv = dir.path().join("curve.csv");
    let out = run(&["curves", "--in", points.to_str().unwrap(),
                    "--out", fit_file.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&fit_file).unwrap()).unwrap();
    assert_eq!(fit["family"], "FIVE_PARAM_LOGISTIC");
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("x,y\n"));
    assert_eq!(csv_text.lines().count(), 201);
}

#[test]
fn init_config_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.json");
    assert!(run(&["init-config", "--out", path.to_str().unwrap()]).status.success());
    // The emitted config is a valid input for another command.
    let out = run(&["model", "build", "--config", path.to_str().unwrap()]);
    assert!(out.status.success());
    let header: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(header["vocab_size"], 512);
}

#[test]
fn jobs_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = run(&["--jobs", "1", "evaluate", "--config", &cfg]);
    let b = run(&["--jobs", "2", "evaluate", "--config", &cfg]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}
