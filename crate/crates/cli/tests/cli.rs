use std::path::Path;
use std::process::{Command, Output};

fn downscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_downscale"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Five synthetic years with three for training and two for testing.
fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let json = serde_json::json!({
        "synth": { "years": 5 },
        "train_years": { "first": 1995, "last": 1997 },
        "test_years": { "first": 1998, "last": 1999 },
        "cv_folds": 3,
        "out_dir": dir.join("out"),
    });
    std::fs::write(&path, json.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_method_is_a_usage_error() {
    let o = downscale(&["train", "--method", "kriging"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kriging"), "{}", stderr(&o));
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = downscale(&[
        "config",
        "--config",
        &cfg,
        "--seed",
        "7",
        "--method",
        "mssl",
        "--out",
        "elsewhere",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 7);
    assert_eq!(v["method"], "mssl");
    assert_eq!(v["out_dir"], "elsewhere");
    assert_eq!(v["cv_folds"], 3);
    assert_eq!(v["synth"]["years"], 5);
}

#[test]
fn overlapping_years_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train_years": {"first": 2000, "last": 2010}}"#).unwrap();
    let o = downscale(&["synth", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn downscale_without_models_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert!(downscale(&["synth", "--config", &cfg]).status.success());
    let o = downscale(&["downscale", "--config", &cfg, "--method", "bcsd"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("model"), "{}", stderr(&o));
}

#[test]
fn two_methods_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert!(downscale(&["synth", "--config", &cfg]).status.success());
    for method in ["bcsd", "pcaols"] {
        for step in ["train", "downscale", "evaluate"] {
            let o = downscale(&[step, "--config", &cfg, "--method", method]);
            assert!(o.status.success(), "{step} {method}: {}", stderr(&o));
            if step == "train" {
                assert!(stdout(&o).contains("0 in test years"), "{}", stdout(&o));
            }
        }
    }
    let o = downscale(&["compare", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(stdout(&o).trim()).unwrap();
    let rmse: Vec<&str> = table.lines().filter(|l| l.starts_with("daily,all,rmse,")).collect();
    assert_eq!(rmse.len(), 2);

    let o = downscale(&["compare", "--config", &cfg, "bcsd"]);
    assert!(!o.status.success());
}
