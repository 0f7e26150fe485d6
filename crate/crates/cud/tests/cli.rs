use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/small.json")
}

fn cud(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cud"))
        .args(args)
        .arg("--config")
        .arg(fixture())
        .env("CUD_RUNS_DIR", dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn cud_score_without_anchors_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cud(dir.path(), &["gen-data"]).status.success());
    let o = cud(dir.path(), &["cud-score"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("`find-anchors`"), "{}", stderr(&o));
    let o = cud(dir.path(), &["find-anchors"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("`train`"), "{}", stderr(&o));
}

#[test]
fn rerunning_train_is_a_cached_no_op() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cud(dir.path(), &["gen-data"]).status.success());
    assert!(cud(dir.path(), &["train"]).status.success());
    let model = dir.path().join("small/models/model.cudm");
    let before = std::fs::metadata(&model).unwrap().modified().unwrap();
    let o = cud(dir.path(), &["train"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("train: cached"), "{}", stderr(&o));
    assert_eq!(std::fs::metadata(&model).unwrap().modified().unwrap(), before);

    // A different seed changes the corpus, so both stages run again.
    let o = cud(dir.path(), &["gen-data", "--seed", "1"]);
    assert!(stderr(&o).contains("gen-data: done"), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("small/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 1);
    assert!(manifest["stages"]["train"]["outputs"].as_array().unwrap().len() >= 3);
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cud(dir.path(), &["gen-data", "--metric", "manhattan"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"corpus": {"vocab_size": 10}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cud"))
        .args(["gen-data", "--config"])
        .arg(&bad)
        .env("CUD_RUNS_DIR", dir.path())
        .output()
        .unwrap();
    assert!(matches!(o.status.code(), Some(2 | 3)), "{}", stderr(&o));

    std::fs::create_dir_all(dir.path().join("small")).unwrap();
    std::fs::write(dir.path().join("small/.lock"), "").unwrap();
    let o = cud(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn single_sample_circuit_writes_scores() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cud(dir.path(), &["gen-data"]).status.success());
    assert!(cud(dir.path(), &["train"]).status.success());
    let o = cud(dir.path(), &["circuit", "--sample", "0", "--k", "5", "--method", "eap"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("small/circuits/sample_0_scores.csv")).unwrap();
    assert!(csv.starts_with("edge_name,score\n"));
    assert_eq!(csv.lines().count(), 1 + 46);
    let c: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("small/circuits/sample_0.circuit.json")).unwrap())
            .unwrap();
    assert_eq!(c["header"]["k"], 5);
    assert_eq!(c["header"]["method"], "eap");
}

#[test]
fn staged_commands_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [
        &["gen-data"][..],
        &["train", "--oracle"],
        &["find-anchors"],
        &["circuit"],
        &["cud-score"],
        &["select-sets"],
        &["unlearn", "--set", "easy", "--run-seed", "1"],
        &["evaluate", "--set", "easy", "--run-seed", "1"],
    ] {
        let o = cud(dir.path(), stage);
        assert!(o.status.success(), "{stage:?}: {}", stderr(&o));
    }
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("small/reports/eval/graddiff_easy_s1.json")).unwrap(),
    )
    .unwrap();
    let jsd = report["jsd_to_retrain"].as_f64().unwrap();
    assert!((0.0..=std::f64::consts::LN_2).contains(&jsd));
    assert_eq!(report["seed"], 1);

    let o = cud(dir.path(), &["unlearn", "--set", "default", "--run-seed", "9"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
