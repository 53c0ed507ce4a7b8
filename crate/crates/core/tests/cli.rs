use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tastesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tastesim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Generates a small world and runs the pipeline on it through the CLI.
fn world_run(root: &Path) {
    let world = root.join("world");
    let config = root.join("config.toml");
    ok(&tastesim(&[
        "synth-gen",
        "--out",
        p(&world),
        "--users",
        "8",
        "--weeks",
        "4",
        "--songs-per-theme",
        "6",
        "--themes",
        "3",
        "--length",
        "32",
        "--config",
        p(&config),
    ]));
    ok(&tastesim(&[
        "run",
        "--config",
        p(&config),
        "--workdir",
        p(&root.join("work")),
        "--set",
        "lda.iterations=40",
        "--set",
        "lda.burn_in=20",
        "--set",
        "pairs.count=100",
        "--set",
        "train.epochs=3",
    ]));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(tastesim(&[]).status.code(), Some(2));
    assert_eq!(tastesim(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(tastesim(&["taste-sim", "--model", "m"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = tastesim(&["taste-sim", "--model", p(&dir.path().join("missing.lda")), "--song-x", "a", "--song-y", "b"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_config_exits_2_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    ok(&tastesim(&["synth-gen", "--out", p(&dir.path().join("world")), "--users", "2", "--weeks", "1", "--config", p(&config)]));
    let work = dir.path().join("work");
    let out = tastesim(&["run", "--config", p(&config), "--workdir", p(&work), "--set", "lda.k=1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tastesim(&["run", "--config", p(&config), "--workdir", p(&work), "--set", "lda.topics=3"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!work.exists());
}

#[test]
fn end_to_end_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    world_run(root);
    let work = root.join("work");
    for name in [
        "corpus.jsonl",
        "vocab.csv",
        "model.lda",
        "pairs.csv",
        "tensors.jsonl",
        "net.ckpt",
        "loss_history.csv",
        "gap_sim.csv",
        "nskip.csv",
        "manifest.json",
    ] {
        assert!(work.join(name).is_file(), "{name} missing");
    }
    let model = work.join("model.lda");
    let events = work.join("events.resolved.tsv");

    // Self taste similarity is one.
    let s = ok(&tastesim(&["taste-sim", "--model", p(&model), "--song-x", "S000000", "--song-y", "S000000"]));
    assert!((s.trim().parse::<f64>().unwrap() - 1.0).abs() < 1e-12, "{s}");

    // max_skip + 1 rows.
    let nskip = root.join("nskip.csv");
    ok(&tastesim(&["analyze-skip", "--events", p(&events), "--model", p(&model), "--max-skip", "10", "--out", p(&nskip)]));
    assert_eq!(fs::read_to_string(&nskip).unwrap().lines().count(), 12);
    let bad = tastesim(&["analyze-skip", "--events", p(&events), "--model", p(&model), "--max-skip", "-1"]);
    assert_eq!(bad.status.code(), Some(2));

    let gaps = root.join("gaps.csv");
    ok(&tastesim(&["analyze-gaps", "--events", p(&events), "--model", p(&model), "--bins", "5", "--out", p(&gaps)]));
    assert_eq!(fs::read_to_string(&gaps).unwrap().lines().count(), 6);

    // Predict from the pipeline's tensors and straight from attributes.
    let ckpt = work.join("net.ckpt");
    let a = ok(&tastesim(&[
        "predict", "--checkpoint", p(&ckpt), "--tensors", p(&work.join("tensors.jsonl")), "--song-x", "S000000", "--song-y", "S010001",
    ]));
    let b = ok(&tastesim(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--attributes",
        p(&root.join("world/attributes.jsonl")),
        "--song-x",
        "S000000",
        "--song-y",
        "S010001",
    ]));
    let (a, b): (f64, f64) = (a.trim().parse().unwrap(), b.trim().parse().unwrap());
    assert!((-1.0..=1.0).contains(&a));
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");

    // Report aggregates without touching the artifacts.
    let before = fs::read(work.join("manifest.json")).unwrap();
    ok(&tastesim(&["report", "--workdir", p(&work)]));
    let report = fs::read_to_string(work.join("report.md")).unwrap();
    assert!(report.contains("Loss curves") && report.contains("Taste similarity by skip level"));
    assert_eq!(fs::read(work.join("manifest.json")).unwrap(), before);
}

#[test]
fn standalone_stages_chain() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let world = root.join("world");
    ok(&tastesim(&["synth-gen", "--out", p(&world), "--users", "6", "--weeks", "3", "--songs-per-theme", "5", "--length", "32"]));
    let resolved = root.join("resolved.tsv");
    let line = ok(&tastesim(&[
        "ingest",
        "--events",
        p(&world.join("events.tsv")),
        "--attributes",
        p(&world.join("attributes.jsonl")),
        "--out",
        p(&resolved),
        "--matches",
        p(&root.join("matches.csv")),
    ]));
    assert!(line.contains("unresolved 0"), "{line}");
    ok(&tastesim(&["build-corpus", "--events", p(&resolved), "--out-dir", p(root)]));
    let model = root.join("model.lda");
    ok(&tastesim(&[
        "lda-fit", "--corpus", p(&root.join("corpus.jsonl")), "--out", p(&model), "--k", "4", "--alpha", "0.1", "--iterations", "30",
        "--burn-in", "10",
    ]));
    let pairs = root.join("pairs.csv");
    ok(&tastesim(&[
        "sample-pairs", "--corpus", p(&root.join("corpus.jsonl")), "--model", p(&model), "--out", p(&pairs), "--count", "50",
        "--splits", "0.6,0.2,0.2",
    ]));
    assert_eq!(fs::read_to_string(&pairs).unwrap().lines().count(), 51);
    let ckpt = root.join("net.ckpt");
    ok(&tastesim(&[
        "train",
        "--pairs",
        p(&pairs),
        "--attributes",
        p(&world.join("attributes.jsonl")),
        "--channels",
        "pitches,timbre,loudness,segments",
        "--length",
        "32",
        "--hidden",
        "16",
        "--epochs",
        "2",
        "--out",
        p(&ckpt),
        "--history",
        p(&root.join("loss.csv")),
    ]));
    assert_eq!(fs::read_to_string(root.join("loss.csv")).unwrap().lines().count(), 4);
    let s = ok(&tastesim(&[
        "predict", "--checkpoint", p(&ckpt), "--attributes", p(&world.join("attributes.jsonl")), "--song-x", "S000000", "--song-y",
        "S000000",
    ]));
    assert!((s.trim().parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
}
