//! End-to-end runs of the `boundary-probe` binary on a small world.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use boundary_probe::cli::{ReportFile, ResultLine};
use boundary_probe::corpus::load_records;
use boundary_probe::tinylm::{load_checkpoint, ModelConfig, ModelParams};

const SMALL: [&str; 10] = [
    "--entities",
    "12",
    "--relations",
    "2",
    "--facts",
    "16",
    "--counterfactuals",
    "4",
    "--objects",
    "20",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boundary-probe"))
        .args(args)
        .env_remove("BOUNDARY_PROBE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn gen_world(dir: &Path, seed: &str) {
    let mut args = vec!["gen-world", "--out"];
    let out = s(dir);
    args.push(&out);
    args.extend(["--seed", seed]);
    args.extend(SMALL);
    ok(&args);
}

fn train(world: &Path, out: &Path, epochs: &str) {
    ok(&["train", "--world", &s(world), "--out", &s(out), "--epochs", epochs, "--seed", "3"]);
}

#[test]
fn gen_world_is_deterministic_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_world(&a, "7");
    gen_world(&b, "7");
    for f in ["world.json", "records.jsonl", "battery.jsonl", "known.jsonl", "corpus.jsonl", "vocab.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let records = load_records(a.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 16 + 4);
    assert!(records.windows(2).all(|w| w[0].id < w[1].id));
    assert!(a.join("manifest.json").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_world(&a, "5");
    let mut args = vec!["gen-world".to_string(), "--out".into(), s(&b)];
    args.extend(SMALL.iter().map(|x| x.to_string()));
    let out = Command::new(env!("CARGO_BIN_EXE_boundary-probe"))
        .args(&args)
        .env("BOUNDARY_PROBE_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(a.join("records.jsonl")).unwrap(), fs::read(b.join("records.jsonl")).unwrap());
}

#[test]
fn infeasible_world_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gen-world", "--out", &s(tmp.path()), "--facts", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_method_and_missing_corpus_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["probe", "--checkpoint", "x", "--records", "y", "--out", "z", "--method", "oracle"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--world", &s(tmp.path()), "--out", &s(&tmp.path().join("m.bplm"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epochs_gives_the_initial_model_and_reloads_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let world = tmp.path().join("w");
    gen_world(&world, "1");
    let ckpt = tmp.path().join("m.bplm");
    train(&world, &ckpt, "0");
    let model = load_checkpoint(&ckpt).unwrap();
    let init = ModelParams::init(ModelConfig::new(model.params.vocab_size(), 3)).unwrap();
    assert_eq!(model.params.as_slice(), init.as_slice());

    let again = tmp.path().join("again.bplm");
    boundary_probe::tinylm::save_checkpoint(&model, &again).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
    assert!(tmp.path().join("m.bplm.manifest.json").exists());
}

#[test]
fn probe_and_report_are_deterministic_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let world = tmp.path().join("w");
    gen_world(&world, "2");
    let ckpt = tmp.path().join("m.bplm");
    train(&world, &ckpt, "2");
    let records = s(&world.join("battery.jsonl"));
    let probe = |method: &str, out: &Path, workers: &str| {
        ok(&[
            "probe",
            "--checkpoint",
            &s(&ckpt),
            "--records",
            &records,
            "--method",
            method,
            "--aggregate",
            "any",
            "--iters",
            "5",
            "--workers",
            workers,
            "--out",
            &s(out),
        ]);
    };
    let pgdc = tmp.path().join("pgdc.jsonl");
    let pgdc_again = tmp.path().join("pgdc2.jsonl");
    let zero = tmp.path().join("zero.jsonl");
    probe("pgdc", &pgdc, "1");
    probe("pgdc", &pgdc_again, "3");
    probe("zero", &zero, "2");
    assert_eq!(fs::read(&pgdc).unwrap(), fs::read(&pgdc_again).unwrap());

    let lines: Vec<ResultLine> = fs::read_to_string(&pgdc)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let battery = load_records(&records).unwrap();
    assert_eq!(lines.len(), battery.iter().map(|r| r.paraphrases.len()).sum::<usize>());
    for l in &lines {
        assert_eq!(l.schema_version, 1);
        let trace = l.trace.as_ref().expect("pgdc lines carry a trace");
        assert_eq!(trace.len(), l.iterations_used.unwrap() + 1);
        if l.zero_shot == Some(true) {
            assert!(l.success && l.iterations_used == Some(0));
        }
    }

    let report = tmp.path().join("report");
    let stdout = ok(&[
        "report",
        "--results",
        &s(&pgdc),
        "--results",
        &s(&zero),
        "--out",
        &s(&report),
        "--epsilon",
        "0.8",
    ]);
    assert!(stdout.contains("records"));
    let parsed: ReportFile = serde_json::from_slice(&fs::read(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(parsed.report.totals.total(), battery.len());
    for (cat, stats) in &parsed.report.categories {
        let p = stats.methods.get("p-pgdc").map(|c| c.successes).unwrap_or(0);
        let z = stats.methods.get("p-zero").map(|c| c.successes).unwrap_or(0);
        assert!(p >= z, "{cat}: pgdc {p} < zero {z}");
    }
    assert!(report.join("coverage.csv").exists());
    assert!(report.join("histogram.csv").exists());
}

#[test]
fn empty_results_give_an_empty_report() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = tmp.path().join("report");
    ok(&["report", "--results", &s(&empty), "--out", &s(&out)]);
    let parsed: ReportFile = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(parsed.report.totals.total(), 0);
}

#[test]
fn malformed_results_are_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{\"schema_version\": 1}\n").unwrap();
    let out = run(&["report", "--results", &s(&bad), "--out", &s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "seed = 4\n[world]\nfacts = 16\nentities = 12\nrelations = 2\ncounterfactuals = 4\nobjects_per_relation = 20\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["--config", &s(&cfg), "gen-world", "--out", &s(&a)]);
    ok(&["--config", &s(&cfg), "gen-world", "--out", &s(&b), "--seed", "5", "--facts", "10"]);
    assert_eq!(load_records(a.join("records.jsonl")).unwrap().len(), 20);
    assert_eq!(load_records(b.join("records.jsonl")).unwrap().len(), 14);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["facts"], 10);
}
