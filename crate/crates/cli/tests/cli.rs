//! End-to-end CLI behaviour: exit codes, environment overrides, schema
//! versioning and manifest replay.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_latent-routing");

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .env_remove("LATENT_ROUTING_OUT_DIR")
        .env_remove("LATENT_ROUTING_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small dataset, tiny-model checkpoint and a short LGS solve.
fn pipeline(dir: &Path) {
    for args in [
        &["gen", "--kind", "tsp", "--n", "6", "--count", "3", "--seed", "5"][..],
        &["train", "--kind", "tsp", "--n", "6", "--model", "tiny", "--epochs", "2", "--batch-size", "4", "--latent-samples", "2", "--seed", "3"],
        &["solve", "--checkpoint", "checkpoint.json", "--dataset", "dataset.jsonl", "--particles", "4", "--iterations", "6", "--trace-dir", "traces"],
    ] {
        let o = cli(dir, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn gap_is_printed_to_four_decimals() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(d.path(), &["eval", "--cost", "7.785", "--optimal", "7.752"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "gap 0.4257%");
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        &["solve"][..],
        &["no-such-command"],
        &["gen", "--kind", "tsp", "--n", "1"],
        &["eval", "--results", "missing.csv"],
        &["verify", "reproduce"],
        &["gen", "--kind", "tsp", "--n", "5", "--threads", "0"],
    ] {
        assert_eq!(code(&cli(d.path(), args)), 2, "{args:?}");
    }
    assert_eq!(code(&cli(d.path(), &["--help"])), 0);
}

#[test]
fn missing_reference_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let o = cli(d.path(), &["eval", "--results", "results.csv"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no reference"));
    let o = cli(d.path(), &["eval", "--results", "results.csv", "--oracle", "--dataset", "dataset.jsonl"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("lgs"));
}

#[test]
fn unknown_major_schema_version_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let p = d.path().join("results.csv");
    let text = std::fs::read_to_string(&p).unwrap().replacen("results 1.0", "results 2.0", 1);
    std::fs::write(&p, text).unwrap();
    let o = cli(d.path(), &["eval", "--results", "results.csv", "--oracle", "--dataset", "dataset.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("major version 2"));
}

#[test]
fn environment_overrides_output_dir_and_threads() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("elsewhere");
    let o = Command::new(BIN)
        .current_dir(d.path())
        .args(["gen", "--kind", "cvrp", "--n", "4", "--count", "2"])
        .env("LATENT_ROUTING_OUT_DIR", &out)
        .env("LATENT_ROUTING_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(out.join("dataset.jsonl").exists());
    assert!(!d.path().join("dataset.jsonl").exists());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("dataset.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 1);
    let bad = Command::new(BIN)
        .current_dir(d.path())
        .args(["gen", "--kind", "tsp", "--n", "4"])
        .env("LATENT_ROUTING_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn outputs_are_thread_count_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let o = cli(b.path(), &["--threads", "3", "solve", "--checkpoint", "checkpoint.json", "--dataset", "dataset.jsonl", "--particles", "4", "--iterations", "6", "--trace-dir", "traces"]);
    assert_eq!(code(&o), 0);
    for f in ["results.csv", "traces/trace_0002.csv", "checkpoint.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn manifests_replay_and_tampering_exits_1() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    for m in ["dataset.jsonl", "checkpoint.json", "results.csv"] {
        let o = cli(d.path(), &["verify", "reproduce", "--manifest", &format!("{m}.manifest.json")]);
        assert_eq!(code(&o), 0, "{m}: {}", stdout(&o));
    }
    let p = d.path().join("results.csv.manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    m["outputs"][0]["hash"] = "0".repeat(64).into();
    std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
    let o = cli(d.path(), &["verify", "reproduce", "--manifest", "results.csv.manifest.json"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL reproduce/output results.csv"));
    let report = std::fs::read_to_string(d.path().join("verify_reproduce.jsonl")).unwrap();
    assert!(report.lines().any(|l| l.contains("\"pass\":false")));
}

#[test]
fn trace_latent_writes_both_files() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let o = cli(d.path(), &["trace-latent", "--checkpoint", "checkpoint.json", "--dataset", "dataset.jsonl", "--index", "2", "--particles", "3", "--iterations", "4"]);
    assert_eq!(code(&o), 0);
    let rows = latent_routing_cli::csvio::read(&d.path().join("latent.csv"), &latent_routing_cli::csvio::LATENT_DUMP).unwrap();
    assert_eq!(rows.len(), 3 * 5);
    let trace = latent_routing_cli::csvio::read(&d.path().join("latent_trace.csv"), &latent_routing_cli::csvio::INFERENCE_TRACE).unwrap();
    assert_eq!(trace.len(), 5);
    let o = cli(d.path(), &["trace-latent", "--checkpoint", "checkpoint.json", "--dataset", "dataset.jsonl", "--index", "9"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn resumed_checkpoint_settings_must_match() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let o = cli(d.path(), &["train", "--resume", "checkpoint.json", "--n", "6", "--epochs", "1", "--batch-size", "4", "--latent-samples", "2", "--out", "more.json", "--trace", "more.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = latent_routing_cli::csvio::read(&d.path().join("more.csv"), &latent_routing_cli::csvio::TRAIN_TRACE).unwrap();
    assert_eq!(rows[0][0], "2");
    let o = cli(d.path(), &["train", "--resume", "checkpoint.json", "--n", "6", "--d-z", "5", "--epochs", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn periodic_checkpoints_are_manifest_outputs() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(d.path(), &["train", "--kind", "cvrp", "--n", "4", "--model", "tiny", "--epochs", "4", "--batch-size", "2", "--latent-samples", "2", "--checkpoint-every", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("checkpoint_epoch00002.json").exists());
    assert!(!d.path().join("checkpoint_epoch00004.json").exists());
    let o = cli(d.path(), &["verify", "reproduce", "--manifest", "checkpoint.json.manifest.json"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("PASS reproduce/output checkpoint_epoch00002.json"));
}
