use std::path::Path;
use std::process::Command;

use archleak_core::arch::{spec_for_step, ArchSpec};
use archleak_core::harness::{self, load_records, ExperimentConfig, RunOptions, Store, FAILURE_VARIANT};

/// An 8-example pool leaves two auxiliary examples for the attacker; for
/// seed 0 both carry the same attribute, so that seed fails and seed 1 does not.
fn tiny_aia(seeds: &[u64]) -> ExperimentConfig {
    let text = format!("schema_version = 1\npreset = \"Aia\"\nseeds = {seeds:?}\n[recipe]\nepochs = 1\n[aia]\npool = 8\n");
    ExperimentConfig::from_toml(&text).unwrap()
}

fn opts(root: &Path, force: bool) -> RunOptions {
    RunOptions { root: root.to_path_buf(), force }
}

#[test]
fn a_failing_seed_keeps_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_aia(&[0, 1]);
    let s = harness::run(&cfg, &opts(dir.path(), false)).unwrap();
    assert!(!s.success());
    assert_eq!(s.failures.len(), 1);
    assert_eq!(s.failures[0].0, 0);
    assert_eq!(s.of("Rendered").len(), 1);
    assert_eq!(s.of("Rendered")[0].seed, 1);

    let stored = load_records(&[dir.path().to_path_buf()]).unwrap();
    assert_eq!(stored.len(), 2);
    let failure = stored.iter().map(|(_, r)| r).find(|r| r.variant == FAILURE_VARIANT).unwrap();
    assert!(failure.error.as_deref().unwrap().contains("single attribute class"));
    assert_eq!(Store::open(dir.path()).unwrap().completed_seeds(&cfg.hash()).unwrap(), [1].into());

    let again = harness::run(&cfg, &opts(dir.path(), false)).unwrap();
    assert_eq!(again.skipped, vec![1]);
    assert_eq!(again.failures.len(), 1);
}

#[test]
fn reruns_skip_finished_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let first = harness::run(&tiny_aia(&[1]), &opts(dir.path(), false)).unwrap();
    assert!(first.success());
    let wider = harness::run(&tiny_aia(&[1, 2]), &opts(dir.path(), false)).unwrap();
    assert_eq!(wider.skipped, vec![1]);
    assert_eq!(wider.records.len(), 1);
    assert_eq!(wider.records[0].seed, 2);

    let forced = harness::run(&tiny_aia(&[1]), &opts(dir.path(), true)).unwrap();
    assert!(forced.skipped.is_empty());
    assert_eq!(forced.records[0].metrics, first.records[0].metrics);
    assert_eq!(Store::open(dir.path()).unwrap().index().unwrap().len(), 3);
}

#[test]
fn invalid_configs_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_aia(&[1]);
    cfg.aia.pool = 4;
    assert!(harness::run(&cfg, &opts(dir.path(), false)).is_err());
    assert!(!dir.path().join("records").exists());
}

fn archleak() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_archleak"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn cli_exit_codes_follow_seed_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, seeds: &str| {
        let p = dir.path().join(name);
        let text = format!("schema_version = 1\npreset = \"Aia\"\nseeds = {seeds}\n[recipe]\nepochs = 1\n[aia]\npool = 8\n");
        std::fs::write(&p, text).unwrap();
        p
    };
    let out = dir.path().join("out");
    let run = |cfg: &Path| archleak().arg("run").arg(cfg).env("ARCHLEAK_OUT", &out).output().unwrap();

    let ok = run(&write("ok.toml", "[1]"));
    assert_eq!(ok.status.code(), Some(0));
    let record = String::from_utf8(ok.stdout).unwrap();
    assert!(record.trim().ends_with("Rendered.json"), "{record}");
    assert!(out.join("index.csv").exists());

    assert_eq!(run(&write("mixed.toml", "[0, 1]")).status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\npreset = \"Aia\"\nseeds = []\n").unwrap();
    assert_eq!(run(&bad).status.code(), Some(2));

    let report = archleak()
        .args(["report", "--kind", "table"])
        .arg(out.join("records"))
        .env("ARCHLEAK_OUT", &out)
        .output()
        .unwrap();
    assert!(report.status.success());
    let table = String::from_utf8(report.stdout).unwrap().lines().find(|l| l.ends_with("-table.csv")).unwrap().to_string();
    let rows = std::fs::read_to_string(table).unwrap();
    // Seed 1 ran once (the second config shares its hash), and failures stay out of tables.
    assert_eq!(rows.lines().count(), 2, "{rows}");
}

#[test]
fn cli_morph_prints_a_loadable_spec() {
    let out = archleak().args(["morph", "--step", "12", "--print-spec", "--desk", "4", "--side", "16"]).output().unwrap();
    assert!(out.status.success());
    let spec = ArchSpec::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(spec, spec_for_step(12, 10, [3, 16, 16]).unwrap().desk(4));

    let diff = archleak().args(["morph", "--step", "12"]).output().unwrap();
    let text = String::from_utf8(diff.stdout).unwrap();
    assert!(text.contains("changed: conv_bias, norm"), "{text}");
    assert_eq!(archleak().args(["morph", "--step", "15"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn cli_rf_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("spec.toml");
    std::fs::write(&p, spec_for_step(1, 10, [3, 64, 64]).unwrap().desk(8).to_toml()).unwrap();
    let out = archleak().arg("rf").arg(&p).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.contains("stem.pool") && l.split_whitespace().nth(4) == Some("11")), "{text}");
    assert!(text.lines().last().unwrap().starts_with("total "));
}
