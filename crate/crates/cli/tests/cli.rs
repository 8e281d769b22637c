use std::path::Path;
use std::process::{Command, Output};

fn kbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn kbf")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_parabolic(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    let out = kbf(&[
        "generate",
        "--system",
        "parabolic",
        "--grid",
        "5",
        "--steps",
        "12",
        "--seed",
        seed,
        "--out",
        p(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = kbf(&["generate", "--system", "parabolic"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--out"));
}

#[test]
fn unknown_system_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kbf(&[
        "generate",
        "--system",
        "cartpole",
        "--out",
        p(&dir.path().join("d.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cartpole"));
}

#[test]
fn bad_horizon_names_the_nearest_valid_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_parabolic(dir.path(), "train.json", "1");
    let out = kbf(&[
        "train",
        "--data",
        p(&data),
        "--horizon",
        "5",
        "--order",
        "3",
        "--out",
        p(&dir.path().join("m.json")),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("multiple of 3"), "{err}");
    assert!(err.contains('6'), "{err}");
}

#[test]
fn missing_input_file_reports_path_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.json");
    let out = kbf(&["eval", "--model", p(&missing), "--data", p(&missing)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nowhere.json"));
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_parabolic(dir.path(), "train.json", "1");
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"method\": \"blo\",\n  oops\n}").unwrap();
    let out = kbf(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("m.json")),
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("bad.json") && err.contains("line 3"), "{err}");
}

#[test]
fn generate_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let train = small_parabolic(dir.path(), "train.json", "1");
    let test = small_parabolic(dir.path(), "test.json", "2");
    let model = dir.path().join("blo.json");
    let out = kbf(&[
        "train",
        "--data",
        p(&train),
        "--test",
        p(&test),
        "--epochs",
        "3",
        "--batches",
        "2",
        "--out",
        p(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("test error"));
    let curve = std::fs::read_to_string(dir.path().join("blo.curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,L_e,L_d,L_r,total,seconds"));
    assert_eq!(curve.lines().count(), 1 + 4);

    let errors = dir.path().join("errors.csv");
    let out = kbf(&[
        "eval",
        "--model",
        p(&model),
        "--data",
        p(&test),
        "--mode",
        "zoh",
        "--out",
        p(&errors),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(&errors).unwrap();
    assert_eq!(csv.lines().count(), 1 + 25);

    let out = kbf(&[
        "predict",
        "--model",
        p(&model),
        "--x0",
        "-1,2",
        "--inputs",
        "0.1,-0.2,0.3",
        "--dt",
        "0.05",
        "--steps",
        "10",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows.len(), 1 + 11);
    assert_eq!(rows[1].split(',').count(), 3);
}

#[test]
fn slo_training_writes_decoder_loss() {
    let dir = tempfile::tempdir().unwrap();
    let train = small_parabolic(dir.path(), "train.json", "1");
    let model = dir.path().join("slo.json");
    let out = kbf(&[
        "train",
        "--data",
        p(&train),
        "--method",
        "slo-n",
        "--horizon",
        "3",
        "--epochs",
        "2",
        "--batches",
        "2",
        "--out",
        p(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let curve = std::fs::read_to_string(dir.path().join("slo.curve.csv")).unwrap();
    let last = curve.lines().last().unwrap();
    assert!(!last.split(',').nth(2).unwrap().is_empty());
}

#[test]
fn oracle_model_tracks_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let test = small_parabolic(dir.path(), "test.json", "3");
    let model = dir.path().join("oracle.json");
    assert_eq!(code(&kbf(&["oracle", "--out", p(&model)])), 0);
    let out = kbf(&["eval", "--model", p(&model), "--data", p(&test)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let pct: f64 = stdout
        .split(": ")
        .nth(1)
        .unwrap()
        .split('%')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(pct < 0.1, "{stdout}");
}

#[test]
fn predict_rejects_wrong_state_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("oracle.json");
    assert_eq!(code(&kbf(&["oracle", "--out", p(&model)])), 0);
    let out = kbf(&[
        "predict",
        "--model",
        p(&model),
        "--x0",
        "1,2,3",
        "--inputs",
        "0,0,0",
        "--dt",
        "0.1",
        "--steps",
        "3",
    ]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("initial state"));
}

#[test]
fn pendulum_variant_flag() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dp.json");
    let out = kbf(&[
        "generate",
        "--system",
        "double-pendulum",
        "--variant",
        "conventional",
        "--count",
        "4",
        "--steps",
        "5",
        "--out",
        p(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = kbf(&[
        "generate",
        "--system",
        "parabolic",
        "--variant",
        "conventional",
        "--out",
        p(&path),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bench_prints_one_row_per_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let train = small_parabolic(dir.path(), "train.json", "1");
    let out = kbf(&[
        "bench",
        "--data",
        p(&train),
        "--horizons",
        "1,2,4",
        "--probe-epochs",
        "1",
        "--batches",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1 + 3);
}

#[test]
fn repro_runs_a_tiny_study() {
    let dir = tempfile::tempdir().unwrap();
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/parabolic.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(preset).unwrap()).unwrap();
    cfg["name"] = "tiny".into();
    cfg["train_data"]["initial"] = serde_json::json!({"grid": {"per_dim": 4}});
    cfg["train_data"]["steps"] = 10.into();
    cfg["test_data"]["initial"] = serde_json::json!({"random": {"count": 3}});
    cfg["training"]["epochs"] = 2.into();
    cfg["training"]["batches"] = 2.into();
    cfg["evaluation"] = serde_json::json!({"ablation": false});
    let cfg_path = dir.path().join("tiny.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();

    let out = kbf(&["repro", p(&cfg_path), "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run_dir = dir.path().join("tiny");
    for file in [
        "config.json",
        "summary.json",
        "blo-h6.model.json",
        "slo-1-h1.curve.csv",
        "slo-n-h5.errors.csv",
    ] {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
}
