use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synth": {"utterance_count": 24, "eval_utterance_count": 12, "frames_per_utterance": 16},
  "tokenizer": {"k": 6},
  "schedule": {"total_epochs": 4, "warmup_epochs": 1, "ssl_unfreeze_epoch": 2}
}"#;

fn difftok(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difftok"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn difftok")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn gradcheck_default_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = difftok(&["gradcheck"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn gradcheck_fault_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "gc.json", r#"{"fault": "mat_mul"}"#);
    let out = difftok(&["gradcheck", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert!(report["worst_param"].is_string());
}

#[test]
fn oversize_gradcheck_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "gc.json", r#"{"frames": 64}"#);
    let out = difftok(&["gradcheck", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradcheck.frames"));
}

#[test]
fn invalid_layer_index_names_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"mode": {"single_layer": 7}}"#);
    let out = difftok(&["train", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mode.single_layer"));
}

#[test]
fn unknown_regime_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = difftok(&["train", "--regime", "half_finetune"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_finite_loss_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    // A learning rate this large overflows the classifier within the first epoch.
    let cfg = write_config(
        tmp.path(),
        "nan.json",
        r#"{"synth": {"utterance_count": 8, "eval_utterance_count": 4, "frames_per_utterance": 8},
            "tokenizer": {"k": 4},
            "optimizer": {"lr": 1e300},
            "schedule": {"total_epochs": 3, "warmup_epochs": 1, "ssl_unfreeze_epoch": 2}}"#,
    );
    let out = difftok(&["train", "--config", &cfg, "--out", "nan"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn train_then_evaluate_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", SMALL);
    let out = difftok(&["train", "--config", &cfg, "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trained: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let run = tmp.path().join("run");
    for f in ["config.json", "train.jsonl", "eval.jsonl", "history.csv", "params.json", "codebook.json", "tokens.txt", "metrics.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let out = difftok(&["evaluate", "--run", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let evaluated: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["frame_accuracy", "mean_asr_loss", "pnmi", "nqe", "tsl", "mter_pct", "config_hash"] {
        assert_eq!(trained[key], evaluated[key], "{key}");
    }
}

#[test]
fn seed_flag_changes_hash_and_default_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", SMALL);
    let a = difftok(&["generate-data", "--config", &cfg], tmp.path());
    let b = difftok(&["generate-data", "--config", &cfg, "--seed", "99"], tmp.path());
    assert!(a.status.success() && b.status.success());
    let dirs: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(dirs.len(), 2);
}

#[test]
fn compare_writes_one_row_per_regime() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_difftok"))
        .args(["compare", "--config", &cfg, "--out", "cmp", "--regimes", "baseline,baseline,full_finetune"])
        .current_dir(tmp.path())
        .env("RUST_LOG", "warn")
        .env("DIFFTOK_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("cmp/comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("regime,frame_accuracy"));
    assert_eq!(lines[1], lines[2], "the same regime twice must give identical rows");
    assert!(lines[3].starts_with("FULL_FINETUNE,"));
    assert!(tmp.path().join("cmp/2-full_finetune/history.csv").exists());
}

#[test]
fn compare_needs_two_regimes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = difftok(&["compare", "--out", "cmp", "--regimes", "baseline"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("cmp").exists());
}
