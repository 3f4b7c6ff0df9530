use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lidsn");

const TINY: &str = r#"{
  "model": {"embed_dim": 8, "spatial_maps": 2, "n_heads": 2, "temporal_depth": 1, "spatial_depth": 1,
            "dropout": 0.0, "ffn_expansion": 2, "temporal_kernel": 5, "spatial_kernel": 3,
            "pool_window": 16, "pool_stride": 16, "classifier_hidden": 4},
  "train": {"max_epochs": 3, "patience": 3, "batch_size": 8},
  "data": {"synth": {"n_subjects": 2, "trials_per_subject": 20, "n_channels": 3, "n_samples": 64, "fs": 32.0,
           "classes": [{"freq_hz": 4.0, "channels": [0], "amplitude": 1.0},
                       {"freq_hz": 9.0, "channels": [2], "amplitude": 1.0}]}},
  "seeds": [3]
}"#;

fn lidsn(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    text.split_whitespace()
        .find_map(|w| w.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {text:?}"))
        .parse()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_fit_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = lidsn(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.json", "curves.csv", "model.bin", "seed_3/fold_0/report.json", "seed_3/fold_0/confusion.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,train_loss,val_loss,val_acc\n"));
    let fold: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("seed_3/fold_0/report.json")).unwrap()).unwrap();
    let fit_acc = fold["fit_metrics"]["acc"].as_f64().unwrap();
    assert_eq!(curves.lines().count() - 1, fold["train"]["epochs"].as_array().unwrap().len());

    let model = out.join("model.bin");
    let o = lidsn(&["eval", "--config", &cfg, "--model", model.to_str().unwrap(), "--subset", "fit"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!((field(&stdout(&o), "acc") - fit_acc).abs() <= 1e-12);
    let o = lidsn(&["eval", "--config", &cfg, "--model", model.to_str().unwrap()]);
    let test_acc = fold["test"]["acc"].as_f64().unwrap();
    assert!((field(&stdout(&o), "acc") - test_acc).abs() <= 1e-12);
    assert!(out.join("confusion.csv").exists());
}

#[test]
fn snapshot_and_data_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    assert!(lidsn(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let other = write_config(dir.path(), &TINY.replace("\"n_channels\": 3", "\"n_channels\": 4"));
    let o = lidsn(&["eval", "--config", &other, "--model", out.join("model.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[data]:") && err.contains("n_channels"), "{err}");
}

#[test]
fn printed_config_reingests_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let first = stdout(&lidsn(&["train", "--config", &cfg, "--print-config"]));
    let echoed = write_config(dir.path(), &first);
    let second = stdout(&lidsn(&["train", "--config", &echoed, "--print-config"]));
    assert_eq!(first, second);
    let defaults = stdout(&lidsn(&["train", "--print-config"]));
    assert!(defaults.contains("\"lr\": 0.001") && defaults.contains("\"batch_size\": 32"));
}

#[test]
fn count_prints_cost() {
    let o = lidsn(&["count"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.starts_with("params=") && s.contains(" flops="), "{s}");
    assert_eq!(field(&s, "params"), 130_025.0);
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["frobnicate"][..], &["count", "--bogus"], &["grad-check"]] {
        let o = lidsn(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"trian": {}}"#);
    assert_eq!(lidsn(&["count", "--config", &cfg]).status.code(), Some(1));
    let o = Command::new(BIN).args(["train", "--config", &write_config(dir.path(), TINY)]).env("LIDSN_THREADS", "0").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_and_numeric_errors_have_their_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.eegb");
    fs::write(&bad, b"NOPE").unwrap();
    let o = lidsn(&["split", "--input", bad.to_str().unwrap(), "--protocol", "CO"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[data]: bad magic"));

    let cfg = write_config(dir.path(), &TINY.replace("\"max_epochs\": 3", "\"lr\": 1e300, \"max_epochs\": 3"));
    let o = lidsn(&["train", "--config", &cfg, "--out", dir.path().join("nan").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[numeric]:"));
}

#[test]
fn file_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    assert!(lidsn(&["synth", "--seed", "2", "--out", &p("a.eegb")]).status.success());
    assert!(lidsn(&["align", "--input", &p("a.eegb"), "--out", &p("b.eegb")]).status.success());
    let o = lidsn(&["split", "--input", &p("b.eegb"), "--protocol", "LOSO"]);
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["protocol"], "LOSO");
    assert_eq!(plan["folds"].as_array().unwrap().len(), 4);
    let o = lidsn(&["features", "--input", &p("a.eegb"), "--out", &p("f.eegb"), "--outer-s", "2", "--inner-s", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 4 s trials, 2 s windows stepping 0.4 s give 6 segments; 1 s inner windows stepping 0.25 s give 5.
    assert_eq!(field(&stdout(&o), "trials"), 1200.0);
    assert_eq!(field(&stdout(&o), "features"), 35.0);
    let o = lidsn(&["features", "--input", &p("a.eegb"), "--out", &p("g.eegb")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_viz_writes_one_table_per_layer_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"train": {"max_epochs": 1, "patience": 1},
            "data": {"synth": {"n_subjects": 1, "trials_per_subject": 10}}}"#,
    );
    let out = dir.path().join("run");
    let o = lidsn(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let viz = dir.path().join("viz");
    let o = lidsn(&["export-viz", "--config", &cfg, "--model", out.join("model.bin").to_str().unwrap(), "--out", viz.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = fs::read_dir(&viz).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    let count = |pre: &str, ext: &str| names.iter().filter(|n| n.starts_with(pre) && n.ends_with(ext)).count();
    assert_eq!(count("trial0_sacm_", ".csv"), 12);
    assert_eq!(count("trial0_sacm_", ".svg"), 12);
    assert_eq!(count("trial0_tcam_", ".csv"), 12);
    assert_eq!(count("trial0_omega_", ".csv"), 3);
    assert_eq!(count("trial0_alpha", ".csv"), 1);
    assert_eq!(count("trial0_saliency", ".svg"), 1);
}

#[test]
fn grad_check_reports_small_error() {
    let o = lidsn(&["grad-check", "--tiny", "--configs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    let last = s.lines().last().unwrap();
    assert!(field(last, "max_rel_err") < 1e-4, "{s}");
    assert_eq!(s.lines().count(), 9);
}
