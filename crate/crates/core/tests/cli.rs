use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const WORKED: &str = r#"{"family":"markov","P":[[0.9,0.1],[0.2,0.8]]}"#;

fn gapped(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gapped"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap()
}

#[test]
fn bound_run_writes_manifest_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = gapped(&["decouple", "bound", "--measure", WORKED, "--tau-max", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["task"]["command"], "decouple_bound");
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("bound.json")).unwrap()).unwrap();
    let c0 = report.to_string();
    assert!(c0.contains("0.875468737353"), "{c0}");
}

#[test]
fn malformed_spec_exits_with_schema_code() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"family":"markov","P":[[0.5,0.4],[0.2,0.8]]}"#).unwrap();
    let o = gapped(&["validate", "--spec", spec.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["violations"][0]["pointer"], "/P/0");

    let o = gapped(&["sample", "--measure", r#"{"family":"gibbs"}"#, "--n", "10", "--seed", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "schema");
}

#[test]
fn reducible_chain_exits_with_measure_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = gapped(
        &["sample", "--measure", r#"{"family":"markov","P":[[1,0],[0,1]]}"#, "--n", "10", "--seed", "1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "measure");
}

#[test]
fn oversized_audit_exits_with_cap_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = gapped(
        &["decouple", "audit", "--measure", WORKED, "--n-max", "10", "--m-max", "10", "--cap", "1000"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_json(&o)["error"], "enumeration_cap");
}

#[test]
fn stochastic_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = gapped(&["sample", "--measure", WORKED, "--n", "10"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

#[test]
fn series_csv_has_header_and_rerun_matches() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let o = gapped(&["series", "--p", WORKED, "--n", "1000", "--seed", "2"], &first);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(first.join("series.csv")).unwrap();
    assert!(csv.starts_with("n,value\n"));
    let second = dir.path().join("b");
    let manifest = first.join("manifest.json");
    let o = gapped(&["rerun", "--manifest", manifest.to_str().unwrap()], &second);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(csv, std::fs::read_to_string(second.join("series.csv")).unwrap());
}
