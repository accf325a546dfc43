use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mockingbird"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_input_leaves_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(&[
        "train",
        "--data-path",
        &s(&tmp.path().join("absent")),
        "--out-dir",
        &s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent"));
    assert!(!out.exists());
}

#[test]
fn schema_violations_and_usage_errors_have_their_own_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"generation": {"alpah": 5}}"#).unwrap();
    let o = run(&[
        "synth",
        "--config",
        &s(&cfg),
        "--out-dir",
        &s(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["synth", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("Exit codes"));
}

#[test]
fn malformed_data_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.bursts");
    fs::write(&data, "0 1 2\nx 3\n").unwrap();
    let o = run(&[
        "train",
        "--data-path",
        &s(&data),
        "--out-dir",
        &s(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(5));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn computation_failure_writes_failed_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("one_class.bursts");
    fs::write(&data, "0 1 2 3\n0 2 2 3\n").unwrap();
    let out = tmp.path().join("o");
    let o = run(&["train", "--data-path", &s(&data), "--out-dir", &s(&out)]);
    assert_eq!(o.status.code(), Some(6));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert!(!out.join("model.mbdm").exists());
}

#[test]
fn outputs_are_never_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(&tmp.path().join("o"));
    assert!(run(&[
        "synth",
        "--classes",
        "3",
        "--instances",
        "4",
        "--out-dir",
        &out
    ])
    .status
    .success());
    let before = fs::read(tmp.path().join("o/synthetic.bursts")).unwrap();
    let o = run(&[
        "synth",
        "--classes",
        "3",
        "--instances",
        "4",
        "--seed",
        "9",
        "--out-dir",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(
        fs::read(tmp.path().join("o/synthetic.bursts")).unwrap(),
        before
    );
}

#[test]
fn preprocess_and_mold_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw.txt");
    fs::write(&raw, "0 1 1 -1 1\n1 -1 1 1 1\n0 1 -1\n").unwrap();
    let clean = tmp.path().join("clean/kept.txt");
    let o = run(&[
        "preprocess",
        "--in",
        &s(&raw),
        "--out",
        &s(&clean),
        "--min-packets",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&clean).unwrap(), "0 1 1 -1 1\n");
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("clean/kept.txt.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["removed_short"], 1);
    assert_eq!(report["removed_incoming_start"], 1);
    assert!(tmp.path().join("clean/kept.txt.manifest.json").exists());
    assert_eq!(
        fs::read_to_string(&raw).unwrap(),
        "0 1 1 -1 1\n1 -1 1 1 1\n0 1 -1\n"
    );

    let events = tmp.path().join("events.jsonl");
    fs::write(
        &events,
        "{\"t\":0,\"dir\":1,\"kind\":\"real\"}\n{\"t\":3,\"dir\":1,\"kind\":\"real\"}\n{\"t\":9,\"dir\":-1,\"kind\":\"real\"}\n",
    )
    .unwrap();
    let target = tmp.path().join("target.bursts");
    fs::write(&target, "0 3 4\n").unwrap();
    let out = tmp.path().join("m");
    let o = run(&[
        "mold",
        "--trace",
        &s(&events),
        "--target",
        &s(&target),
        "--timeout-ms",
        "20",
        "--out-dir",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("mold_report.json")).unwrap()).unwrap();
    assert_eq!(report["dummy_count"], 4);
    assert_eq!(report["added_latency_ms"], 40.0);
    assert_eq!(report["verified"], true);
    assert_eq!(
        fs::read_to_string(out.join("molded.jsonl"))
            .unwrap()
            .lines()
            .count(),
        7
    );
}
