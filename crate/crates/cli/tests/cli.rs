use std::path::Path;
use std::process::{Command, Output};

use ntg::harness::acceptance::repro_config;
use ntg::harness::METRICS_HEADER;

fn ntg(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("config.in.json");
    Command::new(env!("CARGO_BIN_EXE_ntg"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("running ntg")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.in.json"), repro_config().unwrap().to_json()).unwrap();
    dir
}

#[test]
fn stages_run_in_sequence_and_export_metrics() {
    let dir = setup();
    let run = dir.path().join("run");
    ok(&ntg(dir.path(), &["gen"]));
    assert!(run.join("dataset/dataset.json").exists());
    ok(&ntg(dir.path(), &["train"]));
    assert!(run.join("checkpoints/curves.csv").exists());

    let eval = ok(&ntg(dir.path(), &["eval"]));
    assert!(eval.contains("full") && eval.contains("success="), "{eval}");
    let ablate = ok(&ntg(dir.path(), &["ablate"]));
    for c in [
        "no_interpreter",
        "no_localizer",
        "no_edge_classifier",
        "no_gcn",
        "fully_connected_init",
    ] {
        assert!(ablate.contains(c), "{c} missing from {ablate}");
    }
    let nll = ok(&ntg(dir.path(), &["nll"]));
    assert!(nll.contains("uniform_closed_form_max_abs_error"), "{nll}");

    let first = std::fs::read(run.join("metrics.csv")).unwrap();
    ok(&ntg(dir.path(), &["export"]));
    assert_eq!(std::fs::read(run.join("metrics.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    // eval (1) + ablate (6) + nll (3) rows.
    assert_eq!(text.lines().count(), 1 + 1 + 6 + 3);
    assert!(run.join("graphs/eval/full").read_dir().unwrap().next().is_some());
}

#[test]
fn missing_checkpoints_and_wrong_domain_fail() {
    let dir = setup();
    let out = ntg(dir.path(), &["eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoints"));
    ok(&ntg(dir.path(), &["train"]));
    let out = ntg(dir.path(), &["sort-alt"]);
    assert!(!out.status.success());
}

#[test]
fn accept_reports_requested_criteria() {
    let dir = setup();
    let out = ok(&ntg(dir.path(), &["accept", "--only", "4"]));
    assert!(out.starts_with("[PASS] criterion  4"), "{out}");
    assert_eq!(out.lines().count(), 1);
}
