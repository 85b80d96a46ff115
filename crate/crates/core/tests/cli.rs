use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn groklab(results: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groklab"))
        .env("GROKLAB_RESULTS", results)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
[run]
modulus = 7
hidden = 16
train_fraction = 0.6
epochs = 30
eta = 1e-3
gram_window = 4
checkpoint_epochs = [10, 20]
indep_pairs = 8

[run.detector]
min_epoch = 5
slope_lag = 3
late_from = 10
late_to = 30

[verify]
top_k = 10
exact_pairs = 3
"#;

#[test]
fn train_verify_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("results");
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();

    let out = groklab(&results, &["train", "--config", cfg.to_str().unwrap(), "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("slope fire:"), "{text}");
    let run = results.join("train/custom/2");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 31);
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"done\""));
    assert!(manifest.contains("--seed"));

    let out = groklab(
        &results,
        &["verify-thm6", run.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--exact-audit", "3"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(text.matches("sign_match").count(), 2, "{text}");
    assert!(text.contains("exact audit 3/3 agree"), "{text}");
    assert!(run.join("thm6_20.json").exists());
    assert!(run.join("thm6_20_pairs.csv").exists());

    let out = groklab(&results, &["verify-thm6", run.to_str().unwrap(), "--epochs", "15"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[15]"));

    let out = groklab(&results, &["report"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(results.join("report/table5_eta.csv").exists());
    assert!(results.join("report/table1_thm6.csv").exists());
    assert!(results.join("report/summary.json").exists());
}

#[test]
fn control_run_rejects_thm6() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("r");
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = groklab(&results, &["train", "--config", cfg.to_str().unwrap(), "--eta", "0", "--epochs", "12"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("slope fire:"));
    let out = groklab(&results, &["verify-thm6", results.join("train/custom/0").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ridge"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[run]\nepochs = 10\nwindow = 5\n").unwrap();
    let out = groklab(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("window") && err.contains("line 3"), "{err}");

    let out = groklab(tmp.path(), &["train", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let out = groklab(tmp.path(), &["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_tree_is_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = groklab(tmp.path(), &["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn presets_listing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = groklab(tmp.path(), &["presets"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for name in ["headline-grok", "headline-control", "relu", "eta-sweep", "window-sweep", "mp-sweep", "eta1e5-extended"] {
        assert!(text.contains(name), "{name}");
    }
    let out = groklab(tmp.path(), &["presets", "--show", "relu"]);
    assert!(stdout(&out).contains("\"epochs\": 800"));
}
