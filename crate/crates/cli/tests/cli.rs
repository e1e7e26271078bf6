use std::path::Path;

use crlc_cli::run;

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const TINY: &str = r#"{
  "dataset": {"kind": "mixture", "classes": 3, "dim": 5, "n_per_class": 30, "separation": 6.0},
  "model": {"backbone_hidden": [32], "rl_hidden": 32, "feature_dim": 8, "head_hidden": 16, "subheads": 2},
  "batch_size": 30,
  "epochs": 3,
  "eval_every": 1
}"#;

fn crlc(args: &[&str]) -> i32 {
    run(std::iter::once("crlc").chain(args.iter().copied()))
}

#[test]
fn train_writes_report_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(&cfg, TINY);
    let out = dir.path().join("report.json");
    let ckpt = dir.path().join("model.bin");
    let code = crlc(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for field in ["config", "per_epoch", "final_metrics", "runtime_s"] {
        assert!(report.get(field).is_some(), "missing {field}");
    }
    assert_eq!(report["per_epoch"].as_array().unwrap().len(), 3);
    // resolved config is echoed, including untouched defaults
    assert_eq!(report["config"]["temperature"], 0.1);
    assert_eq!(report["config"]["model"]["input_dim"], 5);
    let curves = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert_eq!(curves.lines().count(), 4);
    assert!(ckpt.exists());

    let data = dir.path().join("data.csv");
    assert_eq!(crlc(&["gen-data", "--classes", "3", "--dim", "5", "--n-per-class", "30", "--out", data.to_str().unwrap()]), 0);
    let eval = dir.path().join("eval.json");
    assert_eq!(crlc(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", eval.to_str().unwrap()]), 0);
    let nb = dir.path().join("nb.csv");
    assert_eq!(crlc(&["mine-neighbors", "--data", data.to_str().unwrap(), "--k", "4", "--checkpoint", ckpt.to_str().unwrap(), "--out", nb.to_str().unwrap()]), 0);
    let rows: Vec<String> = std::fs::read_to_string(&nb).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 90);
    assert!(rows.iter().all(|r| r.split(',').count() == 4));
}

#[test]
fn reproducible_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(&cfg, TINY);
    for cmd in ["train", "two-stage", "semi"] {
        let a = dir.path().join(format!("{cmd}-a.json"));
        let b = dir.path().join(format!("{cmd}-b.json"));
        for out in [&a, &b] {
            let code = crlc(&[cmd, "--config", cfg.to_str().unwrap(), "--seed", "5", "--reproducible", "--out", out.to_str().unwrap()]);
            assert_eq!(code, 0, "{cmd}");
        }
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{cmd}");
    }
}

#[test]
fn ablate_emits_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(&cfg, TINY);
    let out = dir.path().join("ablate.json");
    let code = crlc(&["ablate", "--config", cfg.to_str().unwrap(), "--axis", "lambda2", "--values", "0,10", "--jobs", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["config"]["lambda2"], 0.0);
    assert_eq!(reports[1]["config"]["lambda2"], 10.0);
    let bad = crlc(&["ablate", "--config", cfg.to_str().unwrap(), "--axis", "critic", "--values", "cosine", "--out", out.to_str().unwrap()]);
    assert_ne!(bad, 0);
}

#[test]
fn grad_check_passes() {
    assert_eq!(crlc(&["grad-check", "--trials", "100", "--seed", "7"]), 0);
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("r.json");
    assert_eq!(crlc(&["train", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    assert!(!out.exists());
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(&cfg, r#"{"epochs": 1, "no_such_field": 3}"#);
    let out = dir.path().join("r.json");
    assert_eq!(crlc(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    assert_eq!(crlc(&["train", "--bogus-flag"]), 2);
    assert_eq!(crlc(&["frobnicate"]), 2);
    assert_eq!(crlc(&[]), 2);
}
