use std::process::{Command, Output};

fn kakeya(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kakeya"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn split_number_of_cantor_levels() {
    let o = kakeya(&["split-number", "--set", "cantor:L=6", "--base", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "6");
}

#[test]
fn verify_prob_reports_agreement() {
    let o = kakeya(&[
        "verify-prob",
        "--N",
        "2",
        "--J",
        "6",
        "--exhaustive",
        "--sizes",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("all tuples agree"));
    let o = kakeya(&["verify-prob", "--N", "2", "--J", "4", "--exhaustive"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(
        out.contains("4-tuples") && out.contains("all tuples agree"),
        "{out}"
    );
}

#[test]
fn prune_emits_tree_json() {
    let o = kakeya(&["prune", "--set", "dyadic:m=25", "--N", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["N"], 2);
    assert_eq!(v["slopes"].as_array().unwrap().len(), 4);
}

#[test]
fn exit_codes() {
    assert_eq!(kakeya(&["bogus"]).status.code(), Some(64));
    assert_eq!(
        kakeya(&["prune", "--N", "2", "--frobnicate"]).status.code(),
        Some(64)
    );
    assert_eq!(
        kakeya(&["prune", "--set", "foo:x=1", "--N", "2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        kakeya(&["prune", "--set", "dyadic:m=3", "--N", "2"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(kakeya(&["--help"]).status.code(), Some(0));
}

#[test]
fn encode_and_percolate() {
    let o = kakeya(&["encode", "--set", "cantor:L=3"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["vertices_per_level"], serde_json::json!([1, 2, 4, 8]));
    let o = kakeya(&["percolate", "--full", "2", "--depth", "2"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["survival_exact"], "39/64");
    assert_eq!(v["within_three_sigma"], true);
}

#[test]
fn experiments_write_csv_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("out/run");
    let base = base.to_str().unwrap();
    for cmd in ["volume", "moments", "ratio"] {
        let o = kakeya(&[cmd, "--seeds", "2", "--N-max", "2", "--output", base]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(!v["rows"].as_array().unwrap().is_empty());
    }
    let csv = std::fs::read_to_string(dir.path().join("out/run.csv")).unwrap();
    assert!(csv.starts_with("N,R,seed,near_est,near_lb,far,moment1,moment2"));
    let log = std::fs::read_to_string(dir.path().join("out/run.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn config_file_with_unknown_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"sedes": 2}"#).unwrap();
    let o = kakeya(&["volume", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
